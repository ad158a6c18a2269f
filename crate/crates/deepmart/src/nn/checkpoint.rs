//! Binary checkpoint format for a single network.
//!
//! Layout: magic "DMNN", u32 version, u32 in_dim, u32 out_dim, u32 depth,
//! depth x u32 hidden widths, u8 activation kind, f64 activation bound,
//! u8 output kind, then flat little-endian weight/bias arrays in layer
//! order (weights before biases within a layer).

use std::io::{Read, Write};

use super::{Activation, MlpArchitecture, MlpParams, OutputActivation};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DMNN";
const FORMAT_VERSION: u32 = 1;

pub fn write_mlp<W: Write>(p: &MlpParams, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(p.arch.in_dim as u32).to_le_bytes())?;
    w.write_all(&(p.arch.out_dim as u32).to_le_bytes())?;
    w.write_all(&(p.arch.hidden.len() as u32).to_le_bytes())?;
    for q in &p.arch.hidden {
        w.write_all(&(*q as u32).to_le_bytes())?;
    }
    let (act_kind, bound) = match p.arch.activation {
        Activation::BoundedRelu { bound } => (0u8, bound),
        Activation::Relu => (1u8, 0.0),
    };
    w.write_all(&[act_kind])?;
    w.write_all(&bound.to_le_bytes())?;
    let out_kind = match p.arch.output {
        OutputActivation::Linear => 0u8,
        OutputActivation::Sigmoid => 1u8,
    };
    w.write_all(&[out_kind])?;
    for l in 0..p.weights.len() {
        for v in p.weights[l].iter().chain(p.biases[l].iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_mlp<R: Read>(mut r: R) -> Result<MlpParams> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, expected DMNN".into()));
    }
    let mut u32_buf = [0u8; 4];
    let mut read_u32 = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut u32_buf)?;
        Ok(u32::from_le_bytes(u32_buf))
    };
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let in_dim = read_u32(&mut r)? as usize;
    let out_dim = read_u32(&mut r)? as usize;
    let depth = read_u32(&mut r)? as usize;
    let mut hidden = Vec::with_capacity(depth);
    for _ in 0..depth {
        hidden.push(read_u32(&mut r)? as usize);
    }
    let mut byte = [0u8; 1];
    r.read_exact(&mut byte)?;
    let act_kind = byte[0];
    let mut f64_buf = [0u8; 8];
    r.read_exact(&mut f64_buf)?;
    let bound = f64::from_le_bytes(f64_buf);
    r.read_exact(&mut byte)?;
    let out_kind = byte[0];
    let activation = match act_kind {
        0 => Activation::BoundedRelu { bound },
        1 => Activation::Relu,
        k => return Err(Error::Format(format!("unknown activation kind {k}"))),
    };
    let output = match out_kind {
        0 => OutputActivation::Linear,
        1 => OutputActivation::Sigmoid,
        k => return Err(Error::Format(format!("unknown output kind {k}"))),
    };
    let arch = MlpArchitecture::new(in_dim, out_dim, hidden, activation, output)?;
    let dims = arch.dims();
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for lw in dims.windows(2) {
        let (fan_in, fan_out) = (lw[0], lw[1]);
        let mut read_vec = |len: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut f64_buf)?;
                out.push(f64::from_le_bytes(f64_buf));
            }
            Ok(out)
        };
        weights.push(read_vec(fan_in * fan_out)?);
        biases.push(read_vec(fan_out)?);
    }
    Ok(MlpParams {
        arch,
        weights,
        biases,
    })
}
