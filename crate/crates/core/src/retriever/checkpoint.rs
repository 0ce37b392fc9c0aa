//! Retriever checkpoint: `RRET1`, u64 dim, u64 token count with
//! length-prefixed tokens, then for the query and document encoders in that
//! order a trainable flag byte and `vocab·dim` f32 values.

use std::fs;
use std::path::Path;

use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::lm::Vocabulary;
use crate::retriever::{Encoder, EncoderKind, Retriever};

const MAGIC: &[u8; 5] = b"RRET1";

pub fn to_bytes(r: &Retriever) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(r.dim() as u64).to_le_bytes());
    out.extend_from_slice(&(r.vocab.len() as u64).to_le_bytes());
    for t in r.vocab.tokens() {
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        out.extend_from_slice(t.as_bytes());
    }
    for enc in [&r.query, &r.document] {
        out.push(u8::from(enc.trainable));
        for v in &enc.table {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(buf: &[u8]) -> Result<Retriever> {
    let mut rd = Reader::new(buf, "retriever checkpoint");
    rd.magic(MAGIC)?;
    let dim = rd.usize()?;
    let n = rd.usize()?;
    let tokens = (0..n).map(|_| rd.string()).collect::<Result<Vec<_>>>()?;
    let vocab = Vocabulary::from_tokens(tokens)?;
    let mut read_encoder = |kind| -> Result<Encoder> {
        let trainable = rd.u8()? != 0;
        let table = rd.f32s(n * dim)?;
        Ok(Encoder {
            kind,
            dim,
            table,
            trainable,
        })
    };
    let query = read_encoder(EncoderKind::Query)?;
    let document = read_encoder(EncoderKind::Document)?;
    rd.finish()?;
    if dim == 0 {
        return Err(Error::format("retriever checkpoint", "zero dimension"));
    }
    Ok(Retriever { vocab, query, document })
}

pub fn save(r: &Retriever, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(r))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Retriever> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let vocab = Vocabulary::build(["a b c"], 50);
        let mut r = Retriever::new(vocab, 4, 9).unwrap();
        r.query.table[3] = 0.75;
        let back = from_bytes(&to_bytes(&r)).unwrap();
        assert_eq!(back, r);
    }
}
