//! Posterior sample ensembles and their pixelwise statistics.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::field::{Field, FieldShape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Ucos,
    UcosReg,
    Dps,
    Gaussian,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ucos => "ucos",
            Method::UcosReg => "ucos-reg",
            Method::Dps => "dps",
            Method::Gaussian => "gaussian",
        }
    }

    fn code(self) -> u8 {
        match self {
            Method::Ucos => 0,
            Method::UcosReg => 1,
            Method::Dps => 2,
            Method::Gaussian => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Method::Ucos),
            1 => Ok(Method::UcosReg),
            2 => Ok(Method::Dps),
            3 => Ok(Method::Gaussian),
            _ => Err(Error::Format(format!("unknown method code {c}"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ucos" => Ok(Method::Ucos),
            "ucos-reg" => Ok(Method::UcosReg),
            "dps" => Ok(Method::Dps),
            "gaussian" => Ok(Method::Gaussian),
            other => Err(Error::Usage(format!(
                "unknown method {other:?} (expected ucos, ucos-reg, dps or gaussian)"
            ))),
        }
    }
}

/// A chain that failed while the rest of the ensemble completed.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainFailure {
    pub index: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleEnsemble {
    pub shape: FieldShape,
    pub samples: Vec<Field>,
    pub method: Method,
    pub seed: u64,
    pub digest: [u8; 32],
    pub failures: Vec<ChainFailure>,
}

impl SampleEnsemble {
    /// Collects per-chain results; failed chains are kept as diagnostics.
    pub fn from_chains(
        shape: FieldShape,
        chains: Vec<Result<Vec<f64>>>,
        method: Method,
        seed: u64,
    ) -> Result<Self> {
        let mut samples = Vec::new();
        let mut failures = Vec::new();
        for (index, c) in chains.into_iter().enumerate() {
            match c.and_then(|v| Field::from_vec(shape, v)) {
                Ok(f) => samples.push(f),
                Err(e) => failures.push(ChainFailure {
                    index,
                    message: e.to_string(),
                }),
            }
        }
        Ok(Self {
            shape,
            samples,
            method,
            seed,
            digest: [0; 32],
            failures,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `SPENS1\0`, version byte, method byte, seed `u64`, 32-byte config
    /// digest, then `u32` count, channels, height, width and the samples as
    /// `f64`, all little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(ENSEMBLE_MAGIC);
        buf.push(1);
        buf.push(self.method.code());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.digest);
        for v in [
            self.samples.len(),
            self.shape.channels,
            self.shape.height,
            self.shape.width,
        ] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for s in &self.samples {
            for v in s.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let short = |_| Error::Format("ensemble file truncated".into());
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(short)?;
        if &magic != ENSEMBLE_MAGIC {
            return Err(Error::Format("bad ensemble magic".into()));
        }
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2).map_err(short)?;
        if b2[0] != 1 {
            return Err(Error::Format(format!(
                "unsupported ensemble version {}",
                b2[0]
            )));
        }
        let method = Method::from_code(b2[1])?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(short)?;
        let seed = u64::from_le_bytes(b8);
        let mut digest = [0u8; 32];
        r.read_exact(&mut digest).map_err(short)?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let mut b4 = [0u8; 4];
            r.read_exact(&mut b4).map_err(short)?;
            *d = u32::from_le_bytes(b4) as usize;
        }
        let shape = FieldShape::new(dims[1], dims[2], dims[3]);
        if r.len() != dims[0] * shape.len() * 8 {
            return Err(Error::Format(
                "ensemble payload has the wrong length".into(),
            ));
        }
        let samples = r
            .chunks_exact((shape.len() * 8).max(1))
            .take(dims[0])
            .map(|c| {
                let v = c
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                Field::from_vec(shape, v)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shape,
            samples,
            method,
            seed,
            digest,
            failures: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

pub const ENSEMBLE_MAGIC: &[u8; 7] = b"SPENS1\0";

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleStats {
    pub mean: Field,
    /// Pixelwise population standard deviation.
    pub std: Field,
    /// `mean - truth`, when a truth was supplied.
    pub bias: Option<Field>,
}

pub fn ensemble_stats(samples: &[Field], truth: Option<&Field>) -> Result<EnsembleStats> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Parameter("ensemble is empty".into()))?;
    let shape = first.shape();
    if let Some(s) = samples.iter().find(|s| s.shape() != shape) {
        return Err(Error::dim("ensemble sample shape", shape.len(), s.len()));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; shape.len()];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.as_slice()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; shape.len()];
    for s in samples {
        for ((acc, v), m) in var.iter_mut().zip(s.as_slice()).zip(&mean) {
            *acc += (v - m).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    let bias = match truth {
        Some(t) => {
            if t.shape() != shape {
                return Err(Error::dim(
                    format!("truth field {} vs ensemble {}", t.shape(), shape),
                    shape.len(),
                    t.len(),
                ));
            }
            Some(Field::from_vec(
                shape,
                mean.iter().zip(t.as_slice()).map(|(m, t)| m - t).collect(),
            )?)
        }
        None => None,
    };
    Ok(EnsembleStats {
        mean: Field::from_vec(shape, mean)?,
        std: Field::from_vec(shape, std)?,
        bias,
    })
}
