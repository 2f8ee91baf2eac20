//! On-disk formats. A model file is self-describing: the architecture's
//! canonical text travels with the weights, so loading needs no config.
//!
//! Model layout (all integers little-endian):
//!   "SPLN" | u32 version | u32 text_len | arch text | u32 n_heads |
//!   u32 n_tensors | per tensor: u32 rank, u32 dims..., f64 data...
//! Tensors appear in declaration order, backbone first, then each head,
//! weight before bias. Shapes are redundant with the arch text on purpose;
//! the loader cross-checks them and rejects any disagreement.
//!
//! Mask layout:
//!   "SPLM" | u32 version | u32 n_layers | u32 sizes... | u32 n_tasks |
//!   per task, per layer: ceil(size/8) bytes, bit i of byte j = neuron 8j+i.

use std::fs;
use std::path::Path;

use splinter_core::arch::ArchSpec;
use splinter_core::autodiff::Tensor;
use splinter_core::continual::{BinaryMask, MaskLedger};
use splinter_core::network::Network;

use crate::error::{CliError, Result};

const MODEL_MAGIC: &[u8; 4] = b"SPLN";
const MASK_MAGIC: &[u8; 4] = b"SPLM";
const VERSION: u32 = 1;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    off: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.off + n > self.buf.len() {
            return Err(CliError::format(
                self.path,
                self.buf.len() as u64,
                format!("file ends inside {what} (wanted {n} bytes at byte {})", self.off),
            ));
        }
        let s = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: &[u8; 4], kind: &str) -> Result<()> {
        let b = self.take(4, "magic")?;
        if b != expected {
            return Err(CliError::format(
                self.path,
                0,
                format!("not a {kind} file (magic {:?})", &b[..4.min(b.len())]),
            ));
        }
        let v = self.u32("version")?;
        if v != VERSION {
            return Err(CliError::format(self.path, 4, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn done(&self) -> Result<()> {
        if self.off != self.buf.len() {
            return Err(CliError::format(
                self.path,
                self.off as u64,
                format!("{} trailing bytes", self.buf.len() - self.off),
            ));
        }
        Ok(())
    }
}

pub fn save_model(path: &Path, net: &Network) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    push_u32(&mut buf, VERSION);
    let text = net.spec().canonical_text();
    push_u32(&mut buf, text.len() as u32);
    buf.extend_from_slice(text.as_bytes());
    push_u32(&mut buf, net.num_heads() as u32);
    let keys = net.param_keys();
    push_u32(&mut buf, keys.len() as u32);
    for &k in &keys {
        let t = net.param(k);
        push_u32(&mut buf, t.shape().len() as u32);
        for &d in t.shape() {
            push_u32(&mut buf, d as u32);
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| CliError::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Network> {
    let buf = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut r = Reader { buf: &buf, off: 0, path };
    r.magic(MODEL_MAGIC, "model")?;
    let text_len = r.u32("arch text length")? as usize;
    let text_at = r.off;
    let text = std::str::from_utf8(r.take(text_len, "arch text")?)
        .map_err(|_| CliError::format(path, text_at as u64, "arch text is not utf-8"))?;
    let spec = ArchSpec::parse_canonical(text)?;
    let n_heads = r.u32("head count")? as usize;
    let n_tensors = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for i in 0..n_tensors {
        let rank = r.u32("tensor rank")? as usize;
        if rank == 0 || rank > 4 {
            return Err(CliError::format(path, (r.off - 4) as u64, format!("tensor {i} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(8 * numel, "tensor data")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        tensors.push(Tensor::new(shape, data).map_err(splinter_core::Error::from)?);
    }
    r.done()?;
    Ok(Network::from_param_tensors(&spec, n_heads, tensors)?)
}

pub fn save_masks(path: &Path, ledger: &MaskLedger) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MASK_MAGIC);
    push_u32(&mut buf, VERSION);
    let sizes = ledger.layer_sizes();
    push_u32(&mut buf, sizes.len() as u32);
    for &s in sizes {
        push_u32(&mut buf, s as u32);
    }
    push_u32(&mut buf, ledger.num_tasks() as u32);
    for t in 0..ledger.num_tasks() {
        let mask = ledger.owned(t).expect("t < num_tasks");
        for bits in mask.layers() {
            let mut byte = 0u8;
            for (i, &b) in bits.iter().enumerate() {
                if b {
                    byte |= 1 << (i % 8);
                }
                if i % 8 == 7 {
                    buf.push(byte);
                    byte = 0;
                }
            }
            if bits.len() % 8 != 0 {
                buf.push(byte);
            }
        }
    }
    fs::write(path, buf).map_err(|e| CliError::io(path, e))
}

pub fn load_masks(path: &Path) -> Result<MaskLedger> {
    let buf = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut r = Reader { buf: &buf, off: 0, path };
    r.magic(MASK_MAGIC, "mask")?;
    let n_layers = r.u32("layer count")? as usize;
    let mut sizes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        sizes.push(r.u32("layer size")? as usize);
    }
    let n_tasks = r.u32("task count")? as usize;
    let mut ledger = MaskLedger::new(sizes.clone());
    for _ in 0..n_tasks {
        let mut layers = Vec::with_capacity(n_layers);
        for &s in &sizes {
            let raw = r.take(s.div_ceil(8), "mask bits")?;
            let bits: Vec<bool> = (0..s).map(|i| raw[i / 8] & (1 << (i % 8)) != 0).collect();
            layers.push(bits);
        }
        ledger.push(BinaryMask::new(layers)).map_err(splinter_core::Error::from)?;
    }
    r.done()?;
    Ok(ledger)
}

#[cfg(test)]
mod tests {
    use super::*;
    use splinter_core::arch::{lenet5, mlp};
    use splinter_core::network::ForwardOpts;

    #[test]
    fn model_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.model");
        let spec = mlp(3, &[5, 4], 2);
        let mut net = Network::build(&spec, 42);
        net.add_head(43);
        save_model(&p, &net).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back.num_heads(), 2);
        let x = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64 * 0.05).collect()).unwrap();
        for head in 0..2 {
            let opts = ForwardOpts { head, ..Default::default() };
            let a = net.forward_batch(&x, &opts).unwrap();
            let b = back.forward_batch(&x, &opts).unwrap();
            assert!(a.bits_eq(&b));
        }
    }

    #[test]
    fn conv_model_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.model");
        let spec = lenet5(vec![1, 16, 16], 4).unwrap();
        let net = Network::build(&spec, 7);
        save_model(&p, &net).unwrap();
        let back = load_model(&p).unwrap();
        let x = Tensor::new(vec![2, 1, 16, 16], (0..512).map(|i| (i % 9) as f64 / 9.0).collect()).unwrap();
        let a = net.forward_batch(&x, &ForwardOpts::default()).unwrap();
        let b = back.forward_batch(&x, &ForwardOpts::default()).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn corrupt_magic_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.model");
        let net = Network::build(&mlp(3, &[4], 2), 1);
        save_model(&p, &net).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(load_model(&p).unwrap_err().to_string().contains("not a model"));

        save_model(&p, &net).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_model(&p).unwrap_err().to_string();
        assert!(err.contains("ends inside"), "got: {err}");
    }

    #[test]
    fn mask_round_trip_preserves_every_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.masks");
        let mut ledger = MaskLedger::new(vec![9, 3]);
        ledger
            .push(BinaryMask::new(vec![
                vec![true, false, true, false, true, false, true, false, true],
                vec![false, true, false],
            ]))
            .unwrap();
        ledger
            .push(BinaryMask::new(vec![vec![false; 9], vec![true, false, true]]))
            .unwrap();
        save_masks(&p, &ledger).unwrap();
        let back = load_masks(&p).unwrap();
        assert_eq!(back.layer_sizes(), ledger.layer_sizes());
        assert_eq!(back.num_tasks(), 2);
        for t in 0..2 {
            assert_eq!(back.owned(t).unwrap(), ledger.owned(t).unwrap());
        }
    }
}
