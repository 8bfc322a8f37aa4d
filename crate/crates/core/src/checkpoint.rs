//! Binary checkpoint format.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "FDFO" | u32 version | u32 dim | u32 n_conditions | u32 n_hidden | u32 hidden[n_hidden]
//! u64 n_params | f64 params[n_params]
//! u8 has_optimizer | [f64 lr, beta1, beta2, eps, weight_decay | u64 step | f64 m[n] | f64 v[n]]
//! [u8; 32] config_hash | u64 epoch | u64 meta_len | meta (UTF-8) | [u8; 32] sha256 of everything before
//! ```

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{AdamW, AdamWConfig};
use crate::velocity::{Arch, VelocityNet};

pub const MAGIC: &[u8; 4] = b"FDFO";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: VelocityNet,
    pub optimizer: Option<AdamW>,
    pub config_hash: [u8; 32],
    pub epoch: u64,
    /// Free-form JSON describing the data the net was trained on.
    pub meta: String,
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("truncated or corrupt checkpoint ({what})"))
}

fn write_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    for v in vals {
        out.write_f64::<LE>(*v).expect("write to vec");
    }
}

fn read_f64s(cur: &mut Cursor<&[u8]>, n: usize, what: &str) -> Result<Vec<f64>> {
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if n.checked_mul(8).is_none_or(|bytes| bytes > remaining) {
        return Err(corrupt(what));
    }
    let mut vals = vec![0.0; n];
    cur.read_f64_into::<LE>(&mut vals).map_err(|_| corrupt(what))?;
    Ok(vals)
}

fn read_u32(cur: &mut Cursor<&[u8]>, what: &str) -> Result<u32> {
    cur.read_u32::<LE>().map_err(|_| corrupt(what))
}

fn read_u64(cur: &mut Cursor<&[u8]>, what: &str) -> Result<u64> {
    cur.read_u64::<LE>().map_err(|_| corrupt(what))
}

impl Checkpoint {
    pub fn new(net: VelocityNet) -> Self {
        Checkpoint {
            net,
            optimizer: None,
            config_hash: [0; 32],
            epoch: 0,
            meta: String::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = self.net.arch();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LE>(VERSION).unwrap();
        out.write_u32::<LE>(arch.dim as u32).unwrap();
        out.write_u32::<LE>(arch.n_conditions as u32).unwrap();
        out.write_u32::<LE>(arch.hidden.len() as u32).unwrap();
        for h in &arch.hidden {
            out.write_u32::<LE>(*h as u32).unwrap();
        }
        out.write_u64::<LE>(self.net.n_params() as u64).unwrap();
        write_f64s(&mut out, self.net.params());
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                let c = opt.config;
                write_f64s(&mut out, &[c.lr, c.beta1, c.beta2, c.eps, c.weight_decay]);
                out.write_u64::<LE>(opt.step_count()).unwrap();
                write_f64s(&mut out, opt.first_moment());
                write_f64s(&mut out, opt.second_moment());
            }
        }
        out.extend_from_slice(&self.config_hash);
        out.write_u64::<LE>(self.epoch).unwrap();
        out.write_u64::<LE>(self.meta.len() as u64).unwrap();
        out.extend_from_slice(self.meta.as_bytes());
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("missing FDFO magic".into()));
        }
        let mut cur = Cursor::new(bytes);
        cur.set_position(4);
        let version = read_u32(&mut cur, "version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        if bytes.len() < 36 {
            return Err(corrupt("checksum"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut cur = Cursor::new(body);
        cur.set_position(8);
        let dim = read_u32(&mut cur, "dim")? as usize;
        let n_conditions = read_u32(&mut cur, "conditions")? as usize;
        let n_hidden = read_u32(&mut cur, "depth")? as usize;
        if n_hidden > body.len() / 4 {
            return Err(corrupt("depth"));
        }
        let hidden = (0..n_hidden)
            .map(|_| read_u32(&mut cur, "widths").map(|h| h as usize))
            .collect::<Result<Vec<_>>>()?;
        let arch = Arch::new(dim, hidden, n_conditions).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n_params = read_u64(&mut cur, "parameter count")? as usize;
        if n_params != arch.param_count() {
            return Err(Error::Checkpoint(format!(
                "parameter count {n_params} does not match architecture ({})",
                arch.param_count()
            )));
        }
        let params = read_f64s(&mut cur, n_params, "parameters")?;
        let net = VelocityNet::from_params(arch, params)?;
        let optimizer = match cur.read_u8().map_err(|_| corrupt("optimizer flag"))? {
            0 => None,
            1 => {
                let c = read_f64s(&mut cur, 5, "optimizer config")?;
                let config = AdamWConfig {
                    lr: c[0],
                    beta1: c[1],
                    beta2: c[2],
                    eps: c[3],
                    weight_decay: c[4],
                };
                let step = read_u64(&mut cur, "optimizer step")?;
                let m = read_f64s(&mut cur, n_params, "first moment")?;
                let v = read_f64s(&mut cur, n_params, "second moment")?;
                Some(AdamW::from_parts(config, m, v, step)?)
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        let mut config_hash = [0u8; 32];
        cur.read_exact(&mut config_hash).map_err(|_| corrupt("config hash"))?;
        let epoch = read_u64(&mut cur, "epoch")?;
        let meta_len = read_u64(&mut cur, "metadata length")? as usize;
        let start = cur.position() as usize;
        if start.checked_add(meta_len) != Some(body.len()) {
            return Err(corrupt("metadata"));
        }
        let meta = String::from_utf8(body[start..].to_vec()).map_err(|_| corrupt("metadata encoding"))?;
        Ok(Checkpoint {
            net,
            optimizer,
            config_hash,
            epoch,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
