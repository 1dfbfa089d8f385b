//! Versioned binary checkpoints for a [`Policy`].
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      b"GRPK"
//! version    u32
//! vocab      u64
//! end_token  u64
//! order      u64
//! prompts    u64
//! embedding  u8 (0 or 1)
//! n_params   u64
//! params     n_params x f64
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::policy::{Policy, Vocab};

const MAGIC: &[u8; 4] = b"GRPK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a policy checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn write_policy<W: Write>(policy: &Policy, mut out: W) -> Result<(), CheckpointError> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for x in [
        policy.vocab().size(),
        policy.vocab().end_token(),
        policy.context_order(),
        policy.prompt_count(),
    ] {
        out.write_all(&(x as u64).to_le_bytes())?;
    }
    out.write_all(&[policy.prompt_embedding() as u8])?;
    out.write_all(&(policy.num_params() as u64).to_le_bytes())?;
    for p in policy.params() {
        out.write_all(&p.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_usize<R: Read>(r: &mut R, what: &str) -> Result<usize, CheckpointError> {
    usize::try_from(read_u64(r)?).map_err(|_| CheckpointError::Corrupt(format!("{what} out of range")))
}

pub fn read_policy<R: Read>(mut r: R) -> Result<Policy, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let size = read_usize(&mut r, "vocab size")?;
    let end = read_usize(&mut r, "end token")?;
    let order = read_usize(&mut r, "context order")?;
    let prompts = read_usize(&mut r, "prompt count")?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let embedding = match flag[0] {
        0 => false,
        1 => true,
        b => return Err(CheckpointError::Corrupt(format!("embedding flag {b}"))),
    };
    let n = read_usize(&mut r, "parameter count")?;
    let vocab = Vocab::new(size, end).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let expected = Policy::new(vocab, order, prompts, embedding)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))?
        .num_params();
    if n != expected {
        return Err(CheckpointError::Corrupt(format!(
            "{n} parameters stored, shape needs {expected}"
        )));
    }
    let mut params = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        params.push(f64::from_le_bytes(b));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Policy::from_params(vocab, order, prompts, embedding, params)
        .map_err(|e| CheckpointError::Corrupt(e.to_string()))
}
