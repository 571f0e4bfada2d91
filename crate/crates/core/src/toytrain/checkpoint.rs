//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "LPFCKPT\0"
//! version      u32      1
//! weight_bits  u32
//! act_bits     u32
//! width_factor f64
//! topo_len     u32      followed by topo_len bytes of UTF-8 topology text
//! tensors      u32
//! per tensor:  ndims u32, ndims x u32 dims, prod(dims) x f64 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::netspec::parse_topology_named;
use crate::quant::QuantSpec;

use super::ToyNet;

pub const MAGIC: &[u8; 8] = b"LPFCKPT\0";
pub const VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(net: &ToyNet, mut w: W) -> Result<()> {
    let topo = net.topology().to_text();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&net.quant().weight_bits().to_le_bytes())?;
    w.write_all(&net.quant().act_bits().to_le_bytes())?;
    w.write_all(&net.width_factor().to_le_bytes())?;
    w.write_all(&(topo.len() as u32).to_le_bytes())?;
    w.write_all(topo.as_bytes())?;
    w.write_all(&(net.params().len() as u32).to_le_bytes())?;
    for (p, dims) in net.params().iter().zip(net.param_dims()) {
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for &d in dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in p {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| bad("unexpected end of file"))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

/// Largest tensor accepted on load, guarding against corrupt headers.
const MAX_TENSOR: usize = 1 << 28;

pub fn read_checkpoint<R: Read>(r: R) -> Result<ToyNet> {
    let mut r = Reader { inner: r };
    if &r.bytes::<8>()? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let quant = QuantSpec::new(r.u32()?, r.u32()?)?;
    let width = r.f64()?;
    let len = r.u32()? as usize;
    let mut topo = vec![0u8; len];
    r.inner
        .read_exact(&mut topo)
        .map_err(|_| bad("truncated topology"))?;
    let topo = String::from_utf8(topo).map_err(|_| bad("topology is not UTF-8"))?;
    let name = topo
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# "))
        .unwrap_or("network")
        .to_string();
    let topology = parse_topology_named(&name, &topo)?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let nd = r.u32()? as usize;
        if nd > 8 {
            return Err(bad(format!("tensor rank {nd} too large")));
        }
        let mut n = 1usize;
        for _ in 0..nd {
            n = n.saturating_mul(r.u32()? as usize);
        }
        if n > MAX_TENSOR {
            return Err(bad(format!("tensor of {n} values too large")));
        }
        params.push((0..n).map(|_| r.f64()).collect::<Result<Vec<f64>>>()?);
    }
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(bad("trailing bytes"));
    }
    ToyNet::from_params(topology, quant, width, params)
}

pub fn save_checkpoint(net: &ToyNet, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(net, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ToyNet> {
    read_checkpoint(std::fs::read(path)?.as_slice())
}
