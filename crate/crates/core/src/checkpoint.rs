//! Binary checkpoint files.
//!
//! Layout: one version byte, the header length as a little-endian u64, a
//! UTF-8 header, then raw little-endian parameter data. The header holds a
//! `[config]` section of `key = value` lines and a `[params]` section with
//! one `name dtype d0,d1,.. offset` line per tensor (offsets are relative to
//! the start of the data block).

use std::io::Write;
use std::path::Path;

use crate::config::parse_pairs;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{DType, Real, Tensor};

pub const VERSION: u8 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes<T: Real>(model: &Model<T>) -> Vec<u8> {
    let mut header = String::from("[config]\n");
    for (k, v) in model.config().pairs() {
        header.push_str(&format!("{k} = {v}\n"));
    }
    header.push_str("[params]\n");
    let mut data = Vec::new();
    for (name, value) in model.params.iter() {
        let dims: Vec<String> = value.shape().iter().map(|d| d.to_string()).collect();
        let dims = if dims.is_empty() {
            "-".to_string()
        } else {
            dims.join(",")
        };
        header.push_str(&format!("{name} {} {dims} {}\n", T::DTYPE, data.len()));
        for &v in value.data() {
            v.write_le(&mut data);
        }
    }
    let mut out = Vec::with_capacity(9 + header.len() + data.len());
    out.push(VERSION);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&data);
    out
}

struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
}

fn read_values<T: Real>(e: &Entry, data: &[u8]) -> Result<Tensor<T>> {
    let n: usize = e.shape.iter().product();
    let size = e.dtype.size_of();
    let end = e
        .offset
        .checked_add(n * size)
        .filter(|&end| end <= data.len())
        .ok_or_else(|| bad(format!("{}: data block truncated", e.name)))?;
    let bytes = &data[e.offset..end];
    let values: Vec<T> = match e.dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|b| T::from_f64_lossy(f32::read_le(b) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|b| T::from_f64_lossy(f64::read_le(b)))
            .collect(),
    };
    Tensor::new(e.shape.clone(), values)
}

/// Decode a checkpoint into a model of element type `T` (converting if the
/// stored dtype differs).
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let (&version, rest) = bytes.split_first().ok_or_else(|| bad("empty file"))?;
    if version != VERSION {
        return Err(bad(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    if rest.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let header_len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
    let rest = &rest[8..];
    if header_len > rest.len() {
        return Err(bad("truncated header"));
    }
    let header =
        std::str::from_utf8(&rest[..header_len]).map_err(|_| bad("header is not UTF-8"))?;
    let data = &rest[header_len..];

    let (config_text, params_text) = header
        .strip_prefix("[config]\n")
        .and_then(|h| h.split_once("[params]\n"))
        .ok_or_else(|| bad("missing [config] or [params] section"))?;
    let pairs = parse_pairs(config_text).map_err(|e| bad(e.to_string()))?;
    let config = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .map_err(|e| bad(e.to_string()))?;

    let mut entries = Vec::new();
    for line in params_text.lines().filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, dtype, dims, offset] = fields[..] else {
            return Err(bad(format!("malformed parameter line {line:?}")));
        };
        let dtype =
            DType::parse(dtype).ok_or_else(|| bad(format!("{name}: unknown dtype {dtype}")))?;
        let shape = if dims == "-" {
            Vec::new()
        } else {
            dims.split(',')
                .map(|d| {
                    d.parse()
                        .map_err(|_| bad(format!("{name}: bad shape {dims}")))
                })
                .collect::<Result<Vec<usize>>>()?
        };
        let offset = offset
            .parse()
            .map_err(|_| bad(format!("{name}: bad offset {offset}")))?;
        entries.push(Entry {
            name: name.to_string(),
            dtype,
            shape,
            offset,
        });
    }

    let mut model = Model::<T>::build(&config).map_err(|e| bad(e.to_string()))?;
    if entries.len() != model.params.len() {
        return Err(bad(format!(
            "file has {} tensors, the configured network has {}",
            entries.len(),
            model.params.len()
        )));
    }
    for e in &entries {
        let value = read_values::<T>(e, data)?;
        model
            .params
            .set(&e.name, value)
            .map_err(|err| bad(format!("{}: {err}", e.name)))?;
    }
    Ok(model)
}

pub fn save<T: Real>(model: &Model<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(model);
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;
    use crate::tensor::Tape;

    fn tiny() -> ModelConfig {
        ModelConfig {
            height: 32,
            width: 32,
            base_channels: 4,
            n_levels_stft: 4,
            n_levels_stet: 4,
            window: 2,
            seed: 3,
            ..ModelConfig::toy()
        }
    }

    fn logits(model: &Model<f32>) -> Tensor<f32> {
        let tape = Tape::new();
        let g = Graph::new(&tape, &model.params, false);
        let img = tape.constant(Tensor::from_fn([3, 32, 32], |i| {
            ((i * 37) % 101) as f32 / 101.0
        }));
        model.net.forward(&g, img).unwrap().to_tensor()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let model = Model::<f32>::build(&tiny()).unwrap();
        let back: Model<f32> = from_bytes(&to_bytes(&model)).unwrap();
        assert_eq!(back.config(), model.config());
        for ((na, va), (nb, vb)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(va, vb);
        }
        assert_eq!(logits(&back), logits(&model));
    }

    #[test]
    fn alpha_is_stored() {
        let bytes = to_bytes(&Model::<f32>::build(&tiny()).unwrap());
        let header_len = u64::from_le_bytes(bytes[1..9].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[9..9 + header_len]).unwrap();
        assert!(header.lines().any(|l| l.starts_with("stft.alpha f32 1 ")));
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = to_bytes(&Model::<f32>::build(&tiny()).unwrap());
        assert!(matches!(from_bytes::<f32>(&[]), Err(Error::Checkpoint(_))));
        let mut wrong_version = bytes.clone();
        wrong_version[0] = 9;
        assert!(matches!(
            from_bytes::<f32>(&wrong_version),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(
            from_bytes::<f32>(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn loads_into_f64() {
        let model = Model::<f32>::build(&tiny()).unwrap();
        let wide: Model<f64> = from_bytes(&to_bytes(&model)).unwrap();
        assert_eq!(wide.cast::<f32>().params.iter().count(), model.params.len());
        for ((_, a), (_, b)) in model.params.iter().zip(wide.params.iter()) {
            assert_eq!(a, &b.cast::<f32>());
        }
    }
}
