//! Binary LM checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RLM1"
//! u64 window, u64 width, u64 layers, u64 heads, u64 vocab_size, u64 ffn
//! u64 step, u64 seed
//! u64 parameter count, then that many f32 in `model::Layout` order
//! u64 token count, then per token: u32 byte length + UTF-8 bytes
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, ModelConfig, Transformer, Vocabulary};

const MAGIC: &[u8; 4] = b"RLM1";

pub fn to_bytes(model: &LanguageModel) -> Vec<u8> {
    let c = model.config();
    let mut out = Vec::with_capacity(64 + model.net.params.len() * 4);
    out.extend_from_slice(MAGIC);
    for v in [c.window, c.width, c.layers, c.heads, c.vocab_size, c.ffn] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&model.step.to_le_bytes());
    out.extend_from_slice(&model.seed.to_le_bytes());
    out.extend_from_slice(&(model.net.params.len() as u64).to_le_bytes());
    for p in &model.net.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let tokens = model.vocab.tokens();
    out.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
    for t in tokens {
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        out.extend_from_slice(t.as_bytes());
    }
    out
}

pub fn save(model: &LanguageModel, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<LanguageModel> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

pub fn from_bytes(buf: &[u8]) -> Result<LanguageModel> {
    let mut r = Reader::new(buf, "LM checkpoint");
    r.magic(MAGIC)?;
    let window = r.usize()?;
    let width = r.usize()?;
    let layers = r.usize()?;
    let heads = r.usize()?;
    let vocab_size = r.usize()?;
    let ffn = r.usize()?;
    let config = ModelConfig {
        vocab_size,
        window,
        width,
        layers,
        heads,
        ffn,
    };
    let step = r.u64()?;
    let seed = r.u64()?;
    let n = r.usize()?;
    let params = r.f32s(n)?;
    let n_tokens = r.usize()?;
    let tokens = (0..n_tokens).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let vocab = Vocabulary::from_tokens(tokens)?;
    if vocab.len() != vocab_size {
        return Err(Error::format("LM checkpoint", "vocabulary size mismatch"));
    }
    let net = Transformer::from_params(config, params)?;
    Ok(LanguageModel { vocab, net, step, seed })
}
