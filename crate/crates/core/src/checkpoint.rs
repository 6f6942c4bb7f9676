//! Binary checkpoint files for models and adapters.
//!
//! Model files carry the config, the tokenizer, and every parameter tensor in
//! little-endian order, so a load is bit-exact. Adapter files hold only the
//! adapter config and tensors; they attach to a base model loaded separately.
//!
//! Model layout: magic "TLM1", u32 version, u8 dtype tag, length-prefixed
//! config JSON, length-prefixed tokenizer JSON, u32 tensor count, then per
//! tensor: length-prefixed name, u32 rows, u32 cols, raw element bytes.
//! Adapter files use magic "TAD1" and a kind byte instead of the tokenizer.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::adapters::{LoraAdapter, LoraConfig, LoraTarget, LoraTargetKind, SoftPrompt, SoftPromptConfig};
use crate::error::{Error, Result};
use crate::math::{Dtype, Matrix, Real};
use crate::model::{LmConfig, ModelState};
use crate::tokenizer::{Tokenizer, TokenizerSpec};

const MODEL_MAGIC: &[u8; 4] = b"TLM1";
const ADAPTER_MAGIC: &[u8; 4] = b"TAD1";
const VERSION: u32 = 1;

const KIND_LORA: u8 = 0;
const KIND_SOFT_PROMPT: u8 = 1;

/// A model file whose precision is only known at read time.
pub enum LoadedModel {
    F32(ModelState<f32>),
    F64(ModelState<f64>),
}

impl LoadedModel {
    pub fn dtype(&self) -> Dtype {
        match self {
            LoadedModel::F32(_) => Dtype::F32,
            LoadedModel::F64(_) => Dtype::F64,
        }
    }
}

pub enum LoadedAdapter {
    LoraF32(LoraAdapter<f32>),
    LoraF64(LoraAdapter<f64>),
    SoftPromptF32(SoftPrompt<f32>),
    SoftPromptF64(SoftPrompt<f64>),
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> Result<()> {
    w.write_all(&(u32::try_from(bytes.len()).map_err(|_| bad("blob too large"))?).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn write_tensors<W: Write, T: Real>(w: &mut W, tensors: &[(String, &Matrix<T>)]) -> Result<()> {
    w.write_all(&(u32::try_from(tensors.len()).map_err(|_| bad("too many tensors"))?).to_le_bytes())?;
    for (name, m) in tensors {
        write_bytes(w, name.as_bytes())?;
        w.write_all(&(m.rows() as u32).to_le_bytes())?;
        w.write_all(&(m.cols() as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(m.len() * T::DTYPE.size());
        for &v in m.as_slice() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_tensors<R: Read, T: Real>(r: &mut R) -> Result<Vec<(String, Matrix<T>)>> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(r)?).map_err(|e| bad(e.to_string()))?;
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let size = T::DTYPE.size();
        let mut buf = vec![0u8; rows * cols * size];
        r.read_exact(&mut buf)?;
        let data: Vec<T> = buf.chunks_exact(size).map(T::read_le).collect();
        out.push((name, Matrix::from_vec(rows, cols, data)));
    }
    Ok(out)
}

/// Fill a zeroed container from (name, tensor) records; every record must
/// match a tensor by name and shape, and every tensor must be covered.
fn fill_named<T: Real>(
    mut slots: Vec<(String, &mut Matrix<T>)>,
    records: Vec<(String, Matrix<T>)>,
) -> Result<()> {
    let mut filled = vec![false; slots.len()];
    for (name, tensor) in records {
        let idx = slots
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| bad(format!("unexpected tensor {name:?}")))?;
        if filled[idx] {
            return Err(bad(format!("duplicate tensor {name:?}")));
        }
        let slot = &mut slots[idx].1;
        if slot.rows() != tensor.rows() || slot.cols() != tensor.cols() {
            return Err(bad(format!(
                "tensor {name:?} is {}x{}, expected {}x{}",
                tensor.rows(),
                tensor.cols(),
                slot.rows(),
                slot.cols()
            )));
        }
        slot.as_mut_slice().copy_from_slice(tensor.as_slice());
        filled[idx] = true;
    }
    if let Some(pos) = filled.iter().position(|&f| !f) {
        return Err(bad(format!("missing tensor {:?}", slots[pos].0)));
    }
    Ok(())
}

pub fn save_model<T: Real>(path: &Path, model: &ModelState<T>, tokenizer: &Tokenizer) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[T::DTYPE.tag()])?;
    write_bytes(&mut w, &serde_json::to_vec(&model.config).map_err(|e| bad(e.to_string()))?)?;
    write_bytes(&mut w, &serde_json::to_vec(tokenizer.spec()).map_err(|e| bad(e.to_string()))?)?;
    write_tensors(&mut w, &model.named_tensors())?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(LoadedModel, Tokenizer)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(bad(format!("{} is not a model checkpoint", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let dtype = Dtype::from_tag(tag[0]).ok_or_else(|| bad(format!("unknown dtype tag {}", tag[0])))?;
    let config: LmConfig =
        serde_json::from_slice(&read_bytes(&mut r)?).map_err(|e| bad(e.to_string()))?;
    if config.precision.dtype() != dtype {
        return Err(bad("config precision disagrees with dtype tag"));
    }
    let spec: TokenizerSpec =
        serde_json::from_slice(&read_bytes(&mut r)?).map_err(|e| bad(e.to_string()))?;
    let tokenizer = Tokenizer::from_spec(spec);
    if tokenizer.vocab_size() > config.vocab_size {
        return Err(bad(format!(
            "tokenizer needs {} ids but model vocab is {}",
            tokenizer.vocab_size(),
            config.vocab_size
        )));
    }
    let model = match dtype {
        Dtype::F32 => {
            let mut m = ModelState::<f32>::zeros(config)?;
            fill_named(m.named_tensors_mut(), read_tensors(&mut r)?)?;
            LoadedModel::F32(m)
        }
        Dtype::F64 => {
            let mut m = ModelState::<f64>::zeros(config)?;
            fill_named(m.named_tensors_mut(), read_tensors(&mut r)?)?;
            LoadedModel::F64(m)
        }
    };
    Ok((model, tokenizer))
}

fn save_adapter_file<T: Real>(
    path: &Path,
    kind: u8,
    config_json: Vec<u8>,
    tensors: &[(String, &Matrix<T>)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(ADAPTER_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[T::DTYPE.tag(), kind])?;
    write_bytes(&mut w, &config_json)?;
    write_tensors(&mut w, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn save_lora<T: Real>(path: &Path, adapter: &LoraAdapter<T>) -> Result<()> {
    save_adapter_file(
        path,
        KIND_LORA,
        serde_json::to_vec(&adapter.config).map_err(|e| bad(e.to_string()))?,
        &adapter.named_tensors(),
    )
}

pub fn save_soft_prompt<T: Real>(path: &Path, sp: &SoftPrompt<T>) -> Result<()> {
    save_adapter_file(
        path,
        KIND_SOFT_PROMPT,
        serde_json::to_vec(&sp.config).map_err(|e| bad(e.to_string()))?,
        &[("soft_prompt.emb".to_string(), &sp.embeddings)],
    )
}

/// Rebuild a low-rank adapter from its named tensor records.
fn lora_from_records<T: Real>(
    config: LoraConfig,
    records: Vec<(String, Matrix<T>)>,
) -> Result<LoraAdapter<T>> {
    let mut layers: Vec<Vec<LoraTarget<T>>> = Vec::new();
    let mut pending: Option<(usize, LoraTargetKind, Matrix<T>)> = None;
    for (name, tensor) in records {
        let rest = name
            .strip_prefix("lora.layer")
            .ok_or_else(|| bad(format!("unexpected adapter tensor {name:?}")))?;
        let mut parts = rest.splitn(3, '.');
        let layer: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("bad layer index in {name:?}")))?;
        let kind = LoraTargetKind::parse(parts.next().unwrap_or(""))?;
        let which = parts.next().unwrap_or("");
        match (which, pending.take()) {
            ("a", None) => pending = Some((layer, kind, tensor)),
            ("b", Some((la, ka, a))) if la == layer && ka == kind => {
                while layers.len() <= layer {
                    layers.push(Vec::new());
                }
                layers[layer].push(LoraTarget { kind, a, b: tensor });
            }
            _ => return Err(bad(format!("adapter tensors out of order at {name:?}"))),
        }
    }
    if pending.is_some() {
        return Err(bad("dangling adapter tensor pair"));
    }
    if layers.is_empty() || layers.iter().any(Vec::is_empty) {
        return Err(bad("adapter covers no layers"));
    }
    Ok(LoraAdapter { config, layers })
}

pub fn load_adapter(path: &Path) -> Result<LoadedAdapter> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ADAPTER_MAGIC {
        return Err(bad(format!("{} is not an adapter checkpoint", path.display())));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let mut tags = [0u8; 2];
    r.read_exact(&mut tags)?;
    let dtype = Dtype::from_tag(tags[0]).ok_or_else(|| bad(format!("unknown dtype tag {}", tags[0])))?;
    let config_json = read_bytes(&mut r)?;
    match (tags[1], dtype) {
        (KIND_LORA, Dtype::F32) => {
            let config: LoraConfig = serde_json::from_slice(&config_json).map_err(|e| bad(e.to_string()))?;
            Ok(LoadedAdapter::LoraF32(lora_from_records(config, read_tensors(&mut r)?)?))
        }
        (KIND_LORA, Dtype::F64) => {
            let config: LoraConfig = serde_json::from_slice(&config_json).map_err(|e| bad(e.to_string()))?;
            Ok(LoadedAdapter::LoraF64(lora_from_records(config, read_tensors(&mut r)?)?))
        }
        (KIND_SOFT_PROMPT, Dtype::F32) => {
            let config: SoftPromptConfig = serde_json::from_slice(&config_json).map_err(|e| bad(e.to_string()))?;
            Ok(LoadedAdapter::SoftPromptF32(soft_from_records(config, read_tensors(&mut r)?)?))
        }
        (KIND_SOFT_PROMPT, Dtype::F64) => {
            let config: SoftPromptConfig = serde_json::from_slice(&config_json).map_err(|e| bad(e.to_string()))?;
            Ok(LoadedAdapter::SoftPromptF64(soft_from_records(config, read_tensors(&mut r)?)?))
        }
        (k, _) => Err(bad(format!("unknown adapter kind {k}"))),
    }
}

fn soft_from_records<T: Real>(
    config: SoftPromptConfig,
    mut records: Vec<(String, Matrix<T>)>,
) -> Result<SoftPrompt<T>> {
    if records.len() != 1 || records[0].0 != "soft_prompt.emb" {
        return Err(bad("soft prompt file must hold exactly soft_prompt.emb"));
    }
    let embeddings = records.remove(0).1;
    if embeddings.rows() != config.virtual_tokens {
        return Err(bad(format!(
            "soft prompt has {} rows, config says {}",
            embeddings.rows(),
            config.virtual_tokens
        )));
    }
    Ok(SoftPrompt { config, embeddings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Precision;
    use tempfile::tempdir;

    fn config(precision: Precision) -> LmConfig {
        LmConfig {
            vocab_size: 300,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            context_len: 10,
            seed: 21,
            precision,
            tie_embeddings: false,
        }
    }

    #[test]
    fn model_round_trip_is_bit_exact_f32() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model: ModelState<f32> = ModelState::init(config(Precision::F32)).unwrap();
        let tok = Tokenizer::byte();
        save_model(&path, &model, &tok).unwrap();
        let (loaded, tok2) = load_model(&path).unwrap();
        match loaded {
            LoadedModel::F32(m) => {
                assert!(m.bits_eq(&model));
                assert_eq!(m.config, model.config);
            }
            _ => panic!("wrong dtype"),
        }
        assert_eq!(tok2.vocab_size(), 257);
    }

    #[test]
    fn model_round_trip_is_bit_exact_f64_with_word_vocab() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model: ModelState<f64> = ModelState::init(config(Precision::F64)).unwrap();
        let tok = Tokenizer::whitespace_from_lines(["gay people are kind", "straight people lie"]);
        save_model(&path, &model, &tok).unwrap();
        let (loaded, tok2) = load_model(&path).unwrap();
        match loaded {
            LoadedModel::F64(m) => assert!(m.bits_eq(&model)),
            _ => panic!("wrong dtype"),
        }
        assert_eq!(tok2.tokenize("gay people"), tok.tokenize("gay people"));
    }

    #[test]
    fn corrupt_and_truncated_files_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_model(&path).is_err());

        let model: ModelState<f32> = ModelState::init(config(Precision::F32)).unwrap();
        save_model(&path, &model, &Tokenizer::byte()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn oversized_tokenizer_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut cfg = config(Precision::F32);
        cfg.vocab_size = 4; // byte tokenizer needs 257
        let model: ModelState<f32> = ModelState::init(cfg).unwrap();
        save_model(&path, &model, &Tokenizer::byte()).unwrap();
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn lora_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let lc = LoraConfig {
            rank: 3,
            alpha: 6.0,
            dropout: 0.05,
            targets: vec![LoraTargetKind::Wq, LoraTargetKind::MlpOut],
            seed: 4,
        };
        let mut adapter: LoraAdapter<f64> = LoraAdapter::init(lc, &config(Precision::F64)).unwrap();
        adapter.layers[1][0].b.fill(0.25);
        save_lora(&path, &adapter).unwrap();
        match load_adapter(&path).unwrap() {
            LoadedAdapter::LoraF64(a) => {
                assert_eq!(a.config, adapter.config);
                let before = adapter.named_tensors();
                let after = a.named_tensors();
                assert_eq!(before.len(), after.len());
                for ((n1, m1), (n2, m2)) in before.iter().zip(&after) {
                    assert_eq!(n1, n2);
                    assert!(m1.bits_eq(m2));
                }
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn soft_prompt_round_trip_and_kind_separation() {
        let dir = tempdir().unwrap();
        let model: ModelState<f32> = ModelState::init(config(Precision::F32)).unwrap();
        let sp = SoftPrompt::init(
            SoftPromptConfig {
                virtual_tokens: 3,
                init: crate::adapters::SoftPromptInit::Normal,
                seed: 2,
            },
            &model,
        )
        .unwrap();
        let path = dir.path().join("sp.ckpt");
        save_soft_prompt(&path, &sp).unwrap();
        match load_adapter(&path).unwrap() {
            LoadedAdapter::SoftPromptF32(s) => {
                assert!(s.embeddings.bits_eq(&sp.embeddings));
                assert_eq!(s.config, sp.config);
            }
            _ => panic!("wrong kind"),
        }
        // A model file is not an adapter file.
        let mpath = dir.path().join("m.ckpt");
        save_model(&mpath, &model, &Tokenizer::byte()).unwrap();
        assert!(load_adapter(&mpath).is_err());
        assert!(load_model(&path).is_err());
    }
}
