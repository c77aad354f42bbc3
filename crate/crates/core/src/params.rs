//! Named parameter collections, the SGD update and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic   b"FAMLCKPT"
//! version u32 (= 1)
//! count   u32
//! repeat count times:
//!   name_len u32, name utf-8 bytes
//!   rank u32, dims u64 * rank
//!   payload f64 * prod(dims)
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FAMLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered collection of named tensors for one model replica.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(Tensor::all_finite)
    }

    /// Checks that `other` has the same names, order and shapes.
    pub fn check_aligned(&self, other: &ModelParams) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ParamMismatch(format!(
                "{} tensors vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb {
                return Err(Error::ParamMismatch(format!("name `{na}` vs `{nb}`")));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::ParamMismatch(format!(
                    "`{na}` shape {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, t) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut out = ModelParams::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            out.push(name, Tensor::new(shape, data)?);
        }
        Ok(out)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// `p ← p − lr·g` for every tensor; `grads` must align with `params`.
pub fn sgd_step(params: &ModelParams, grads: &ModelParams, lr: f64) -> Result<ModelParams> {
    params.check_aligned(grads)?;
    let mut out = params.clone();
    for ((_, p), (_, g)) in out.entries.iter_mut().zip(grads.entries.iter()) {
        for (x, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * d;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one(name: &str, x: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.push(name, Tensor::scalar(x));
        p
    }

    #[test]
    fn sgd_arithmetic() {
        let p = sgd_step(&one("w", 1.0), &one("w", 2.0), 0.1).unwrap();
        assert!((p.get("w").unwrap().item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let p = one("w", 1.25);
        assert_eq!(sgd_step(&p, &one("w", 9.0), 0.0).unwrap(), p);
    }

    #[test]
    fn sgd_rejects_mismatch() {
        assert!(sgd_step(&one("w", 1.0), &one("v", 1.0), 0.1).is_err());
        let mut wide = ModelParams::new();
        wide.push("w", Tensor::zeros(&[2]));
        assert!(sgd_step(&one("w", 1.0), &wide, 0.1).is_err());
    }

    #[test]
    fn two_steps_equal_accumulated_step() {
        let p = one("w", 0.5);
        let g1 = one("w", 0.3);
        let g2 = one("w", -1.1);
        let two = sgd_step(&sgd_step(&p, &g1, 0.1).unwrap(), &g2, 0.1).unwrap();
        let acc = sgd_step(&p, &one("w", 0.3 - 1.1), 0.1).unwrap();
        assert!((two.get("w").unwrap().item() - acc.get("w").unwrap().item()).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let err = ModelParams::read_checkpoint(&b"NOTACKPT\x01\0\0\0"[..]).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip(vals in prop::collection::vec(-1e6f64..1e6, 1..12), cols in 1usize..4) {
            let rows = vals.len() / cols;
            prop_assume!(rows > 0);
            let mut p = ModelParams::new();
            p.push("enc.w0", Tensor::matrix(rows, cols, vals[..rows * cols].to_vec()).unwrap());
            p.push("head.b", Tensor::scalar(vals[0]));
            let mut buf = Vec::new();
            p.write_checkpoint(&mut buf).unwrap();
            prop_assert_eq!(ModelParams::read_checkpoint(&buf[..]).unwrap(), p);
        }
    }
}
