//! Binary weight files.
//!
//! Layout (little-endian): magic `BSN1`, then d, h, l as u32, activation tag, m tag and
//! boundary flag as u8. Next come the m parameters (C for a scaled identity, d scales for a
//! scaled diagonal), the boundary bounds (d lower, d upper) when present, and finally the
//! 1 + p parameters [θ0, θu] as f64.

use std::io::{Read, Write};
use std::path::Path;

use super::{Activation, Boundary, MChoice, MlpArchitecture, SteinError, SteinNetwork};

const MAGIC: [u8; 4] = *b"BSN1";

fn m_tag(m: &MChoice) -> u8 {
    match m {
        MChoice::Identity => 0,
        MChoice::ScaledIdentity(_) => 1,
        MChoice::InverseSquareNorm => 2,
        MChoice::InverseNorm => 3,
        MChoice::DensityScaled => 4,
        MChoice::DiagX => 5,
        MChoice::ScaledDiagonal(_) => 6,
    }
}

pub fn weights_to_bytes(net: &SteinNetwork) -> Vec<u8> {
    let a = &net.arch;
    let mut out = Vec::with_capacity(20 + 8 * (net.n_params_total() + 3 * a.in_dim));
    out.extend_from_slice(&MAGIC);
    for v in [a.in_dim, a.hidden_width, a.hidden_layers] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(a.activation.tag());
    out.push(m_tag(&net.m_choice));
    out.push(u8::from(net.boundary.is_some()));
    let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
    match &net.m_choice {
        MChoice::ScaledIdentity(c) => put(*c),
        MChoice::ScaledDiagonal(c) => c.iter().for_each(|&v| put(v)),
        _ => {}
    }
    if let Some(b) = &net.boundary {
        b.lower.iter().chain(&b.upper).for_each(|&v| put(v));
    }
    put(net.theta_0);
    net.theta_u.iter().for_each(|&v| put(v));
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], SteinError> {
        if self.buf.len() - self.pos < n {
            return Err(SteinError::CorruptPayload(format!("unexpected end of data at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, SteinError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u8(&mut self) -> Result<u8, SteinError> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64, SteinError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, SteinError> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<SteinNetwork, SteinError> {
    if bytes.len() < 4 {
        return Err(SteinError::CorruptPayload("missing header".into()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(SteinError::VersionMismatch { found: magic });
    }
    let mut c = Cursor { buf: bytes, pos: 4 };
    let (d, h, l) = (c.u32()?, c.u32()?, c.u32()?);
    let activation = Activation::from_tag(c.u8()?).ok_or_else(|| SteinError::CorruptPayload("unknown activation tag".into()))?;
    let mtag = c.u8()?;
    let has_boundary = match c.u8()? {
        0 => false,
        1 => true,
        other => return Err(SteinError::CorruptPayload(format!("bad boundary flag {other}"))),
    };
    let arch = MlpArchitecture { in_dim: d, hidden_width: h, hidden_layers: l, activation };
    arch.validate().map_err(|e| SteinError::CorruptPayload(e.to_string()))?;
    let m_choice = match mtag {
        0 => MChoice::Identity,
        1 => MChoice::ScaledIdentity(c.f64()?),
        2 => MChoice::InverseSquareNorm,
        3 => MChoice::InverseNorm,
        4 => MChoice::DensityScaled,
        5 => MChoice::DiagX,
        6 => MChoice::ScaledDiagonal(c.f64s(d)?),
        other => return Err(SteinError::CorruptPayload(format!("unknown m tag {other}"))),
    };
    let boundary = if has_boundary { Some(Boundary { lower: c.f64s(d)?, upper: c.f64s(d)? }) } else { None };
    let theta_0 = c.f64()?;
    let theta_u = c.f64s(arch.n_params())?;
    if c.pos != bytes.len() {
        return Err(SteinError::CorruptPayload(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(SteinNetwork { arch, theta_u, theta_0, m_choice, boundary })
}

pub fn write_weights(net: &SteinNetwork, path: impl AsRef<Path>) -> Result<(), SteinError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&weights_to_bytes(net))?;
    Ok(())
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<SteinNetwork, SteinError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    weights_from_bytes(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;

    fn sample_net() -> SteinNetwork {
        let mut rng = seeded_rng(3);
        let mut net = SteinNetwork::init(MlpArchitecture::new(2), &mut rng).unwrap().with_m(MChoice::ScaledIdentity(2.5));
        net.theta_0 = -0.125;
        net.with_boundary(vec![0.0, f64::NEG_INFINITY], vec![1.0, 3.0])
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let net = sample_net();
        let back = weights_from_bytes(&weights_to_bytes(&net)).unwrap();
        assert_eq!(back.arch, net.arch);
        assert_eq!(back.m_choice, net.m_choice);
        assert_eq!(back.boundary, net.boundary);
        assert_eq!(back.theta_0.to_bits(), net.theta_0.to_bits());
        assert!(back.theta_u.iter().zip(&net.theta_u).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bsn");
        let net = sample_net().with_m(MChoice::ScaledDiagonal(vec![1.5, 0.25]));
        write_weights(&net, &path).unwrap();
        assert_eq!(read_weights(&path).unwrap(), net);
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let bytes = weights_to_bytes(&sample_net());
        for cut in [5, 17, bytes.len() - 1] {
            assert!(matches!(weights_from_bytes(&bytes[..cut]), Err(SteinError::CorruptPayload(_))));
        }
    }

    #[test]
    fn wrong_magic_is_version_mismatch() {
        let mut bytes = weights_to_bytes(&sample_net());
        bytes[3] = b'2';
        assert!(matches!(weights_from_bytes(&bytes), Err(SteinError::VersionMismatch { .. })));
    }
}
