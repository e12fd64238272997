//! Binary checkpoint format.
//!
//! ```text
//! "EXLB"            4 bytes magic
//! version           u32 LE
//! layer count       u32 LE
//! per layer:
//!   in, out         u32 LE each
//!   activation      u8 (0 identity, 1 relu, 2 tanh)
//!   weights         out·in f64 LE, row-major
//!   bias            out f64 LE
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use super::network::{Activation, Architecture, DenseLayer, Network};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EXLB";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(net: &Network) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + net.num_params() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for l in net.layers() {
        buf.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
        buf.push(l.activation().code());
        for v in l.weights().data().iter().chain(l.bias().data()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

fn read_exact(cur: &mut Cursor<&[u8]>, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut out = vec![0u8; n];
    cur.read_exact(&mut out)
        .map_err(|_| Error::Format(format!("truncated file while reading {what}")))?;
    Ok(out)
}

fn read_u32(cur: &mut Cursor<&[u8]>, what: &str) -> Result<u32> {
    let b = read_exact(cur, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_f64s(cur: &mut Cursor<&[u8]>, n: usize, what: &str) -> Result<Vec<f64>> {
    let bytes = read_exact(cur, n * 8, what)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    let mut cur = Cursor::new(bytes);
    let magic = read_exact(&mut cur, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(&magic))));
    }
    let version = read_u32(&mut cur, "version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let n_layers = read_u32(&mut cur, "layer count")? as usize;
    if n_layers == 0 {
        return Err(Error::Format("checkpoint declares zero layers".into()));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for k in 0..n_layers {
        let inp = read_u32(&mut cur, "layer dims")? as usize;
        let out = read_u32(&mut cur, "layer dims")? as usize;
        if inp == 0 || out == 0 {
            return Err(Error::Format(format!("layer {k} has a zero dimension")));
        }
        let code = read_exact(&mut cur, 1, "activation")?[0];
        let act = Activation::from_code(code)
            .ok_or_else(|| Error::Format(format!("layer {k}: unknown activation code {code}")))?;
        let w = read_f64s(&mut cur, inp * out, "weights")?;
        let b = read_f64s(&mut cur, out, "bias")?;
        layers.push(DenseLayer::new(Tensor::matrix(out, inp, w)?, Tensor::vector(b)?, act)?);
    }
    if (cur.position() as usize) != bytes.len() {
        return Err(Error::Format("trailing bytes after last layer".into()));
    }
    Network::from_layers(layers).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(net))?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    decode(&fs::read(path)?)
}

/// Loads a checkpoint and requires it to have the given layer widths.
pub fn load_checkpoint_as(path: impl AsRef<Path>, arch: &Architecture) -> Result<Network> {
    let net = load_checkpoint(path)?;
    let found = net.architecture().widths;
    if found != arch.widths {
        return Err(Error::Shape(format!(
            "checkpoint widths {found:?} do not match expected {:?}",
            arch.widths
        )));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64, widths: &[usize]) -> Network {
        Network::new(&Architecture::mlp(widths), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn round_trip_preserves_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.exlb");
        let a = net(1, &[5, 7, 3]);
        save_checkpoint(&a, &path).unwrap();
        let b = load_checkpoint(&path).unwrap();
        let x = Tensor::matrix(2, 5, (0..10).map(|i| (i as f64).cos()).collect()).unwrap();
        let ya = a.predict(&x).unwrap();
        let yb = b.predict(&x).unwrap();
        assert!(ya.data().iter().zip(yb.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode(&net(2, &[2, 1]));
        assert_eq!(&bytes[..4], b"EXLB");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &1u32.to_le_bytes());
        assert_eq!(bytes.len(), 12 + 9 + 8 * 3);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let mut bytes = encode(&net(3, &[2, 2]));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch_and_truncation() {
        let mut bytes = encode(&net(4, &[2, 2]));
        let good = bytes.clone();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format(m)) if m.contains("version")));
        assert!(matches!(decode(&good[..good.len() - 3]), Err(Error::Format(m)) if m.contains("truncated")));
    }

    #[test]
    fn architecture_mismatch_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.exlb");
        save_checkpoint(&net(5, &[4, 3, 2]), &path).unwrap();
        let err = load_checkpoint_as(&path, &Architecture::mlp(&[4, 5, 2])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
