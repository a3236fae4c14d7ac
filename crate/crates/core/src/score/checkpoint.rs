//! Binary checkpoints for [`ScoreNet`].
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic     8 bytes  "VTDISNET"
//! version   u32      1
//! arch      u32      0 = mlp, 1 = pairwise
//! arch_a    u32      dim (mlp) or particles (pairwise)
//! arch_b    u32      0 (mlp) or spatial (pairwise)
//! sigma     f64      data scale
//! layers    u32      number of entries in the size table
//! sizes     u32 * layers
//! count     u64      number of weights
//! weights   f64 * count
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::mlp::Mlp;
use super::network::{Architecture, ScoreNet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"VTDISNET";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, net: &ScoreNet) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let (kind, a, b) = match net.architecture() {
        Architecture::Mlp { dim } => (0u32, dim, 0),
        Architecture::Pairwise { particles, spatial } => (1u32, particles, spatial),
    };
    for v in [kind, a as u32, b as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&net.sigma_data().to_le_bytes())?;
    let sizes = net.mlp().sizes();
    w.write_all(&(sizes.len() as u32).to_le_bytes())?;
    for &s in sizes {
        w.write_all(&(s as u32).to_le_bytes())?;
    }
    w.write_all(&(net.params().len() as u64).to_le_bytes())?;
    for p in net.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("checkpoint is truncated".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ScoreNet> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a score-network checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let kind = read_u32(&mut r)?;
    let a = read_u32(&mut r)? as usize;
    let b = read_u32(&mut r)? as usize;
    let arch = match kind {
        0 => Architecture::Mlp { dim: a },
        1 => Architecture::Pairwise { particles: a, spatial: b },
        k => return Err(Error::Format(format!("unknown architecture tag {k}"))),
    };
    let sigma = f64::from_bits(read_u64(&mut r)?);
    let layers = read_u32(&mut r)? as usize;
    if layers > 64 {
        return Err(Error::Format(format!("implausible layer count {layers}")));
    }
    let sizes: Vec<usize> = (0..layers).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<_>>()?;
    let count = read_u64(&mut r)? as usize;
    let expected: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if count != expected {
        return Err(Error::Format(format!("weight count {count} does not match layer table ({expected})")));
    }
    let params = (0..count).map(|_| read_u64(&mut r).map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    ScoreNet::from_parts(arch, Mlp::from_params(&sizes, params)?, sigma)
}

pub fn save_checkpoint(path: &Path, net: &ScoreNet) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut f, net)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ScoreNet> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = SeedTree::new(4).rng();
        for arch in [Architecture::Mlp { dim: 3 }, Architecture::Pairwise { particles: 4, spatial: 2 }] {
            let net = ScoreNet::new(&mut rng, arch, &[5, 7], 0.83).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &net).unwrap();
            let back = read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(back.architecture(), net.architecture());
            assert_eq!(back.sigma_data().to_bits(), net.sigma_data().to_bits());
            assert!(back.params().iter().zip(net.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
            let mut again = Vec::new();
            write_checkpoint(&mut again, &back).unwrap();
            assert_eq!(buf, again);
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let net = ScoreNet::zeroed(Architecture::Mlp { dim: 2 }, &[3], 1.0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
        let mut ver = buf;
        ver[8] = 9;
        assert!(read_checkpoint(ver.as_slice()).is_err());
    }
}
