//! Binary checkpoint format.
//!
//! Layout: magic `FDQA` | u32 LE version (1) | u32 LE descriptor byte length
//! | descriptor UTF-8 (canonical key=value lines) | u32 LE tensor count |
//! per tensor: u16 LE name length, UTF-8 name, u8 dtype (0 = f32), u8 rank,
//! rank * u32 LE dims, row-major little-endian f32 payload.
//!
//! Tensors are written in a fixed order (parameters, then the running
//! statistics of every initialized batch-norm layer), so loading and
//! re-saving a checkpoint reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::graph::Network;
use super::{build_network, descriptor_string, parse_descriptor};

const MAGIC: &[u8; 4] = b"FDQA";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn checkpoint_bytes(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let desc = descriptor_string(&net.config, net.num_outputs);
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());

    let stats: Vec<&super::BnLayerState> =
        net.bn_states.iter().filter(|s| s.state.initialized).collect();
    let count = net.params.len() + 2 * stats.len();
    out.extend_from_slice(&(count as u32).to_le_bytes());

    for p in &net.params {
        write_tensor(&mut out, &p.name, &p.value);
    }
    for s in stats {
        let c = s.state.channels();
        let mean = Tensor::new(&[c], s.state.running_mean.clone()).expect("stat shape");
        let var = Tensor::new(&[c], s.state.running_var.clone()).expect("stat shape");
        write_tensor(&mut out, &format!("{}.running_mean", s.name), &mean);
        write_tensor(&mut out, &format!("{}.running_var", s.name), &var);
    }
    out
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_bytes(net))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let bytes = fs::read(path)?;
    network_from_bytes(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::checkpoint(
                self.pos as u64,
                format!("truncated while reading {what} ({n} bytes needed)"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn network_from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::checkpoint(0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version_at = r.pos as u64;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::checkpoint(
            version_at,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let desc_len = r.u32("descriptor length")? as usize;
    let desc_at = r.pos as u64;
    let desc = std::str::from_utf8(r.take(desc_len, "descriptor")?)
        .map_err(|_| Error::checkpoint(desc_at, "descriptor is not valid UTF-8".to_string()))?;
    let (config, num_outputs) = parse_descriptor(desc)?;

    // seed is irrelevant: every parameter is overwritten below
    let mut net = build_network(&config, num_outputs, 0)?;

    let count = r.u32("tensor count")? as usize;
    let mut seen = vec![false; net.params().len()];
    let mut stat_mean = vec![false; net.bn_states().len()];
    let mut stat_var = vec![false; net.bn_states().len()];
    for _ in 0..count {
        let name_at = r.pos as u64;
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::checkpoint(name_at, "tensor name is not valid UTF-8".to_string()))?
            .to_string();
        let dtype_at = r.pos as u64;
        let dtype = r.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::checkpoint(dtype_at, format!("unsupported dtype {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload_at = r.pos as u64;
        let payload = r.take(numel * 4, "tensor payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| {
            Error::checkpoint(payload_at, format!("tensor {name} has invalid shape: {e}"))
        })?;

        if let Some(idx) = net.params().iter().position(|p| p.name == name) {
            if net.params()[idx].value.shape() != tensor.shape() {
                return Err(Error::checkpoint(
                    name_at,
                    format!(
                        "tensor {name} has shape {:?}, architecture expects {:?}",
                        tensor.shape(),
                        net.params()[idx].value.shape()
                    ),
                ));
            }
            net.params_mut()[idx].value = tensor;
            seen[idx] = true;
        } else if let Some(prefix) = name.strip_suffix(".running_mean") {
            let idx = find_bn(&net, prefix, name_at, &name)?;
            net.bn_states_mut()[idx].state.running_mean = tensor.into_data();
            stat_mean[idx] = true;
        } else if let Some(prefix) = name.strip_suffix(".running_var") {
            let idx = find_bn(&net, prefix, name_at, &name)?;
            net.bn_states_mut()[idx].state.running_var = tensor.into_data();
            stat_var[idx] = true;
        } else {
            return Err(Error::checkpoint(
                name_at,
                format!("tensor {name} does not belong to this architecture"),
            ));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::checkpoint(
            r.pos as u64,
            format!("{} trailing bytes after the last tensor", bytes.len() - r.pos),
        ));
    }
    if let Some(idx) = seen.iter().position(|&s| !s) {
        return Err(Error::checkpoint(
            r.pos as u64,
            format!("checkpoint is missing parameter {}", net.params()[idx].name),
        ));
    }
    for i in 0..net.bn_states().len() {
        match (stat_mean[i], stat_var[i]) {
            (true, true) => net.bn_states_mut()[i].state.initialized = true,
            (false, false) => {}
            _ => {
                return Err(Error::checkpoint(
                    r.pos as u64,
                    format!(
                        "batch-norm layer {} has incomplete running statistics",
                        net.bn_states()[i].name
                    ),
                ))
            }
        }
    }
    Ok(net)
}

fn find_bn(net: &Network, prefix: &str, offset: u64, name: &str) -> Result<usize> {
    net.bn_states()
        .iter()
        .position(|s| s.name == prefix)
        .ok_or_else(|| Error::checkpoint(offset, format!("tensor {name} does not belong to this architecture")))
}
