//! Binary model checkpoints.
//!
//! Layout (little endian): magic `KTCKPT\0`, `u32` format version, `u32`
//! metadata length followed by UTF-8 TOML metadata (the training
//! configuration plus model facts), `u32` block count, then per block a
//! `u32` name length, the name, a `u32` rank, `u64` dimensions and the
//! `f64` values. Blocks named `param.*` hold parameters; `buffer.*` hold
//! the vocabulary mask and, for RKT, the relation matrix triplets.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{KtError, Result};
use crate::models::{Model, RelationContext, Vocab};
use crate::params::{Decay, ParamStore};
use crate::relation::RelationMatrix;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 7] = b"KTCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

struct Block {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

pub fn to_bytes(model: &Model, cfg: &TrainConfig) -> Vec<u8> {
    let spec = model.spec();
    let mut meta: toml::Table = toml::from_str(&cfg.to_toml()).expect("config is valid toml");
    // the model's own facts win over whatever the config says
    meta.insert("model".into(), spec.kind.name().into());
    meta.insert("dim".into(), (spec.dim as i64).into());
    meta.insert("window".into(), (spec.window as i64).into());
    meta.insert("memory_slots".into(), (spec.memory_slots as i64).into());
    meta.insert("lambda".into(), spec.lambda.into());
    meta.insert("dropout".into(), spec.dropout.into());
    let mut facts = toml::Table::new();
    facts.insert("num_exercises".into(), (spec.num_exercises as i64).into());
    facts.insert("memory_students".into(), (spec.memory_students as i64).into());
    let mut blocks = Vec::new();
    let vocab = model.vocab();
    blocks.push(Block {
        name: "buffer.vocab_seen".into(),
        dims: vec![vocab.num_exercises()],
        data: vocab.seen().iter().map(|&s| f64::from(u8::from(s))).collect(),
    });
    if let Some(ctx) = model.relation() {
        facts.insert("relation_theta".into(), ctx.matrix.theta().into());
        facts.insert(
            "memory_student_ids".into(),
            toml::Value::Array(ctx.students().iter().map(|s| s.as_str().into()).collect()),
        );
        let mut data = Vec::with_capacity(3 * ctx.matrix.nnz());
        for ((i, j), v) in ctx.matrix.iter() {
            data.extend([f64::from(i), f64::from(j), v]);
        }
        blocks.push(Block {
            name: "buffer.relation".into(),
            dims: vec![ctx.matrix.nnz(), 3],
            data,
        });
    }
    meta.insert("checkpoint".into(), toml::Value::Table(facts));
    for p in model.params().iter() {
        blocks.push(Block {
            name: format!("param.{}", p.name),
            dims: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        });
    }

    let meta = toml::to_string(&meta).expect("metadata serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in &blocks {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.dims.len() as u32).to_le_bytes());
        for &d in &b.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| KtError::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| KtError::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, TrainConfig)> {
    let bad = |m: String| KtError::Checkpoint(m);
    let mut r = Reader { bytes, at: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta_text = r.string(meta_len)?;
    let mut meta: toml::Table = meta_text.parse().map_err(|e| bad(format!("metadata: {e}")))?;
    let facts = match meta.remove("checkpoint") {
        Some(toml::Value::Table(t)) => t,
        _ => return Err(bad("metadata lacks [checkpoint]".into())),
    };
    let cfg: TrainConfig = meta.try_into().map_err(|e: toml::de::Error| bad(format!("config: {e}")))?;
    let int = |k: &str| -> Result<usize> {
        facts
            .get(k)
            .and_then(toml::Value::as_integer)
            .and_then(|v| usize::try_from(v).ok())
            .ok_or_else(|| bad(format!("metadata lacks `{k}`")))
    };
    let num_exercises = int("num_exercises")?;
    let memory_students = int("memory_students")?;

    let n_blocks = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("block too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blocks.push(Block { name, dims, data });
    }
    if r.at != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    let find = |name: &str| blocks.iter().find(|b| b.name == name);

    let seen = find("buffer.vocab_seen").ok_or_else(|| bad("missing vocabulary buffer".into()))?;
    if seen.data.len() != num_exercises {
        return Err(bad("vocabulary buffer size differs from exercise count".into()));
    }
    let vocab = Vocab::new(num_exercises, seen.data.iter().map(|&v| v != 0.0).collect());
    let relation = match find("buffer.relation") {
        Some(b) => {
            let theta = facts
                .get("relation_theta")
                .and_then(toml::Value::as_float)
                .ok_or_else(|| bad("metadata lacks `relation_theta`".into()))?;
            let ids: Vec<String> = facts
                .get("memory_student_ids")
                .and_then(toml::Value::as_array)
                .ok_or_else(|| bad("metadata lacks `memory_student_ids`".into()))?
                .iter()
                .map(|v| v.as_str().map(str::to_string))
                .collect::<Option<_>>()
                .ok_or_else(|| bad("non-string student id".into()))?;
            let entries = b
                .data
                .chunks_exact(3)
                .map(|c| ((c[0] as u32, c[1] as u32), c[2]));
            let matrix = RelationMatrix::from_entries(num_exercises, theta, entries)?;
            Some(RelationContext::new(matrix, ids))
        }
        None => None,
    };
    let spec = cfg.model_spec(num_exercises, memory_students);
    let mut model = Model::new(spec, vocab, relation, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut stored = ParamStore::new();
    for b in blocks.iter().filter(|b| b.name.starts_with("param.")) {
        stored.add(&b.name["param.".len()..], Tensor::new(&b.dims, b.data.clone())?, Decay::None);
    }
    if stored.len() != model.params().len() {
        return Err(bad(format!(
            "checkpoint has {} parameters, model expects {}",
            stored.len(),
            model.params().len()
        )));
    }
    model.params_mut().load_from(&stored)?;
    Ok((model, cfg))
}

pub fn save(model: &Model, cfg: &TrainConfig, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model, cfg)).map_err(|e| KtError::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, TrainConfig)> {
    let bytes = std::fs::read(path).map_err(|e| KtError::io(path, e))?;
    from_bytes(&bytes)
}
