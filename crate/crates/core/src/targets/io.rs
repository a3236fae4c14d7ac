//! Sample-set files: one header line, then one configuration per row.
//!
//! ```text
//! # samples target=dw4 dim=8 particles=4 spatial=2
//! 0.125,-1.5,...
//! ```
//!
//! Floats use the shortest round-trip representation, so a write/read cycle is exact.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleHeader {
    pub target: String,
    pub dim: usize,
    pub shape: Option<(usize, usize)>,
}

impl SampleHeader {
    fn line(&self) -> String {
        let mut s = format!("# samples target={} dim={}", self.target, self.dim);
        if let Some((m, n)) = self.shape {
            let _ = write!(s, " particles={m} spatial={n}");
        }
        s
    }

    fn parse(line: &str) -> Result<Self> {
        let rest = line
            .strip_prefix("# samples")
            .ok_or_else(|| Error::Format(format!("missing sample header, got {line:?}")))?;
        let (mut target, mut dim, mut m, mut n) = (None, None, None, None);
        for field in rest.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| Error::Format(format!("bad header field {field:?}")))?;
            let num = || v.parse::<usize>().map_err(|_| Error::Format(format!("bad header value {field:?}")));
            match k {
                "target" => target = Some(v.to_string()),
                "dim" => dim = Some(num()?),
                "particles" => m = Some(num()?),
                "spatial" => n = Some(num()?),
                _ => return Err(Error::Format(format!("unknown header field {k:?}"))),
            }
        }
        let shape = match (m, n) {
            (Some(m), Some(n)) => Some((m, n)),
            (None, None) => None,
            _ => return Err(Error::Format("particles and spatial must appear together".into())),
        };
        Ok(Self {
            target: target.ok_or_else(|| Error::Format("header lacks target".into()))?,
            dim: dim.ok_or_else(|| Error::Format("header lacks dim".into()))?,
            shape,
        })
    }
}

pub fn write_samples(path: &Path, header: &SampleHeader, samples: &[DVector<f64>]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", header.line())?;
    for x in samples {
        if x.len() != header.dim {
            return Err(Error::DimensionMismatch { expected: header.dim, got: x.len() });
        }
        let row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<(SampleHeader, Vec<DVector<f64>>)> {
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let first = lines.next().ok_or_else(|| Error::Format("empty sample file".into()))??;
    let header = SampleHeader::parse(first.trim_end())?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| Error::Format(format!("row {}: {e}", i + 1)))?;
        if row.len() != header.dim {
            return Err(Error::Format(format!("row {} has {} values, expected {}", i + 1, row.len(), header.dim)));
        }
        samples.push(DVector::from_vec(row));
    }
    Ok((header, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("vtdis-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s.csv");
        let header = SampleHeader { target: "dw4".into(), dim: 4, shape: Some((2, 2)) };
        let xs = vec![DVector::from_vec(vec![0.1, -1e-300, 3.0e12, 1.0 / 3.0]), DVector::from_vec(vec![0.0, -0.0, 2.5, -7.25])];
        write_samples(&path, &header, &xs).unwrap();
        let (h, ys) = read_samples(&path).unwrap();
        assert_eq!(h, header);
        assert_eq!(xs.len(), ys.len());
        for (x, y) in xs.iter().zip(&ys) {
            for (a, b) in x.iter().zip(y.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        std::fs::write(&path, "# samples target=gmm dim=2\n1,2,3\n").unwrap();
        assert!(read_samples(&path).is_err());
        std::fs::write(&path, "1,2\n").unwrap();
        assert!(read_samples(&path).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
