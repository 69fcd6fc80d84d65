//! `FRLNET1` network checkpoints.
//!
//! Little-endian layout:
//!
//! | field | type |
//! |---|---|
//! | magic | 8 bytes `FRLNET1\0` |
//! | layer count `L` | u32 |
//! | per layer: rows (out), cols (in) | u32, u32 |
//! | per layer: weights, row-major | `rows * cols` f64 |
//! | per layer: biases | `rows` f64 |
//! | Adam flag | u8 (0 = absent, 1 = present) |
//! | if present: step count, beta1, beta2, eps | u64, f64, f64, f64 |
//! | if present: first moments, then second moments | same layout as the weights/biases above, without shape headers |

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::mlp::{Layer, NetParams};
use super::optim::AdamState;
use crate::error::{Error, Result};

pub const NET_MAGIC: &[u8; 8] = b"FRLNET1\0";
const FORMAT: &str = "FRLNET1";

pub fn encode(params: &NetParams, adam: Option<&AdamState>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.param_count() * 8 * 3);
    out.extend_from_slice(NET_MAGIC);
    out.write_u32::<LittleEndian>(params.layer_count() as u32).unwrap();
    for layer in params.layers() {
        out.write_u32::<LittleEndian>(layer.out_dim() as u32).unwrap();
        out.write_u32::<LittleEndian>(layer.in_dim() as u32).unwrap();
        write_f64s(&mut out, layer.weights());
        write_f64s(&mut out, layer.biases());
    }
    match adam {
        None => out.push(0),
        Some(state) => {
            out.push(1);
            out.write_u64::<LittleEndian>(state.step_count).unwrap();
            for c in [state.beta1, state.beta2, state.eps] {
                out.write_f64::<LittleEndian>(c).unwrap();
            }
            for moment in [&state.first_moment, &state.second_moment] {
                for t in moment.tensors() {
                    write_f64s(&mut out, t);
                }
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(NetParams, Option<AdamState>)> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Truncated(FORMAT))?;
    if &magic != NET_MAGIC {
        return Err(Error::BadMagic(FORMAT));
    }
    let count = read_u32(&mut r)? as usize;
    if count == 0 {
        return Err(invalid("zero layers"));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        if rows.checked_mul(cols).map_or(true, |n| n * 8 > r.len()) {
            return Err(Error::Truncated(FORMAT));
        }
        let weights = read_f64s(&mut r, rows * cols)?;
        let biases = read_f64s(&mut r, rows)?;
        layers.push(Layer::new(cols, rows, weights, biases)?);
    }
    let params = NetParams::from_layers(layers).map_err(|e| invalid(&e.to_string()))?;
    let flag = r.read_u8().map_err(|_| Error::Truncated(FORMAT))?;
    let adam = match flag {
        0 => None,
        1 => {
            let step_count = r.read_u64::<LittleEndian>().map_err(|_| Error::Truncated(FORMAT))?;
            let beta1 = read_f64(&mut r)?;
            let beta2 = read_f64(&mut r)?;
            let eps = read_f64(&mut r)?;
            let mut state = AdamState::with_constants(&params, beta1, beta2, eps);
            state.step_count = step_count;
            for moment in [&mut state.first_moment, &mut state.second_moment] {
                for t in moment.tensors_mut() {
                    let values = read_f64s(&mut r, t.len())?;
                    t.copy_from_slice(&values);
                }
            }
            Some(state)
        }
        other => return Err(invalid(&format!("adam flag {other}"))),
    };
    if !r.is_empty() {
        return Err(invalid("trailing bytes"));
    }
    Ok((params, adam))
}

pub fn save(path: &Path, params: &NetParams, adam: Option<&AdamState>) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&encode(params, adam))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(NetParams, Option<AdamState>)> {
    decode(&fs::read(path)?)
}

fn invalid(reason: &str) -> Error {
    Error::InvalidFile {
        format: FORMAT,
        reason: reason.to_owned(),
    }
}

fn write_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        out.write_f64::<LittleEndian>(x).unwrap();
    }
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(|_| Error::Truncated(FORMAT))
}

fn read_f64(r: &mut &[u8]) -> Result<f64> {
    r.read_f64::<LittleEndian>().map_err(|_| Error::Truncated(FORMAT))
}

fn read_f64s(r: &mut &[u8], n: usize) -> Result<Vec<f64>> {
    if r.len() < n * 8 {
        return Err(Error::Truncated(FORMAT));
    }
    (0..n).map(|_| read_f64(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::adam_step;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> NetParams {
        NetParams::init(&[2, 4, 4, 3], &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    #[test]
    fn round_trip_with_and_without_adam() {
        let mut p = net();
        let (decoded, adam) = decode(&encode(&p, None)).unwrap();
        assert_eq!(decoded, p);
        assert!(adam.is_none());

        let mut state = AdamState::new(&p);
        let g = net();
        adam_step(&mut p, &g, &mut state, 1e-3).unwrap();
        let bytes = encode(&p, Some(&state));
        let (decoded, adam) = decode(&bytes).unwrap();
        assert_eq!(decoded, p);
        assert_eq!(adam.as_ref(), Some(&state));
        assert_eq!(encode(&decoded, adam.as_ref()), bytes);
    }

    #[test]
    fn header_layout() {
        let p = net();
        let bytes = encode(&p, None);
        assert_eq!(&bytes[..8], b"FRLNET1\0");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
    }

    #[test]
    fn corrupt_inputs() {
        let mut bytes = encode(&net(), None);
        let truncated = &bytes[..bytes.len() - 5];
        assert!(matches!(decode(truncated), Err(Error::Truncated(_))));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::BadMagic(_))));
    }
}
