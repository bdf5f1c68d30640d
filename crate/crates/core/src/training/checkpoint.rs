//! Binary checkpoint container.
//!
//! Layout (little-endian): `GANM`, u32 version, u32 meta length + meta text,
//! tensor records `{u16 name length, name, u8 dtype, u8 rank, u32 dims...,
//! data}`, then a u64 FNV-1a checksum of every preceding byte.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::io::Write;
use std::path::Path;

use fnv::FnvHasher;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::aucode::AuSchema;
use crate::error::{Error, Result};
use crate::models::{Critic, Generator, Model};
use crate::numerics::{tensor_digest, AdamState, ParameterSet, Real, Rng, Tensor};

pub const MAGIC: &[u8; 4] = b"GANM";
pub const FORMAT_VERSION: u32 = 1;

/// Resumable position of the seeded generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Counters and settings stored alongside the tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub version: u32,
    /// Completed epochs.
    pub epoch: usize,
    pub critic_steps: u64,
    pub gen_steps: u64,
    pub config: TrainConfig,
    pub schema: AuSchema,
    pub rng: RngState,
    /// Digest of every stored tensor, by record name.
    pub digests: BTreeMap<String, u64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model<f32>,
    pub gen_adam: AdamState<f32>,
    pub critic_adam: AdamState<f32>,
}

fn records(ck: &Checkpoint) -> Vec<(String, &Tensor<f32>)> {
    fn tag<'a>(
        prefix: &'a str,
        it: impl Iterator<Item = (&'a String, &'a Tensor<f32>)> + 'a,
    ) -> impl Iterator<Item = (String, &'a Tensor<f32>)> + 'a {
        it.map(move |(k, t)| (format!("{prefix}/{k}"), t))
    }
    tag("gen", ck.model.gen_params.iter())
        .chain(tag("critic", ck.model.critic_params.iter()))
        .chain(tag("adam.gen.m", ck.gen_adam.first.iter()))
        .chain(tag("adam.gen.v", ck.gen_adam.second.iter()))
        .chain(tag("adam.critic.m", ck.critic_adam.first.iter()))
        .chain(tag("adam.critic.v", ck.critic_adam.second.iter()))
        .collect()
}

fn meta_text(ck: &Checkpoint, recs: &[(String, &Tensor<f32>)]) -> String {
    let m = &ck.meta;
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    kv("version", FORMAT_VERSION.to_string());
    kv("epoch", m.epoch.to_string());
    kv("critic_steps", m.critic_steps.to_string());
    kv("gen_steps", m.gen_steps.to_string());
    kv("gen_adam_step", ck.gen_adam.step.to_string());
    kv("critic_adam_step", ck.critic_adam.step.to_string());
    kv("gen_adam_lr", ck.gen_adam.lr.to_string());
    kv("critic_adam_lr", ck.critic_adam.lr.to_string());
    kv("rng_seed", hex::encode(m.rng.seed));
    kv("rng_stream", m.rng.stream.to_string());
    kv("rng_word_pos", m.rng.word_pos.to_string());
    kv("generator_parameters", ck.model.generator.parameter_count().to_string());
    kv("critic_parameters", ck.model.critic.parameter_count().to_string());
    kv("tensors", recs.len().to_string());
    for line in m.config.to_text().lines() {
        let (k, v) = line.split_once(" = ").expect("config text is key = value");
        kv(&format!("config.{k}"), v.to_string());
    }
    for (i, e) in m.schema.entries().iter().enumerate() {
        kv(&format!("schema.{i:03}"), format!("{} {}", e.facs, e.name));
    }
    for (name, t) in recs {
        kv(&format!("digest.{name}"), format!("{:016x}", tensor_digest(*t)));
    }
    s
}

/// Serializes to bytes.
pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let recs = records(ck);
    let meta = meta_text(ck, &recs);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    for (name, t) in &recs {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(f32::DTYPE);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        f32::to_le_bytes_vec(t.data(), &mut out);
    }
    let mut h = FnvHasher::default();
    h.write(&out);
    out.extend_from_slice(&h.finish().to_le_bytes());
    out
}

/// Writes through a temporary file and a rename, so readers never see a
/// partial checkpoint.
pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(what.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn field<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T> {
    meta.get(key)
        .ok_or_else(|| bad(format!("meta field `{key}` missing")))?
        .parse()
        .map_err(|_| bad(format!("meta field `{key}` is malformed")))
}

fn fill(
    set: &mut ParameterSet<f32>,
    shapes: &[(String, Vec<usize>)],
    prefix: &str,
    tensors: &mut BTreeMap<String, Tensor<f32>>,
) -> Result<()> {
    for (name, shape) in shapes {
        let key = format!("{prefix}/{name}");
        let t = tensors
            .remove(&key)
            .ok_or_else(|| bad(format!("tensor `{key}` missing")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::shape("checkpoint", t.shape(), shape));
        }
        set.insert(name.clone(), t)?;
    }
    Ok(())
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta_len = c.u32("meta length")? as usize;
    let meta_raw =
        std::str::from_utf8(c.take(meta_len, "meta block")?).map_err(|_| bad("meta block is not UTF-8"))?;
    let meta: BTreeMap<String, String> = meta_raw
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let count: usize = field(&meta, "tensors")?;

    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = c.u16("tensor name length")? as usize;
        let name = String::from_utf8(c.take(nlen, "tensor name")?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let dtype = c.u8(&name)?;
        if dtype != f32::DTYPE {
            return Err(bad(format!("tensor `{name}` has unsupported dtype {dtype}")));
        }
        let rank = c.u8(&name)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32(&name)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4, &name)?;
        let data = raw.chunks_exact(4).map(f32::from_le_chunk).collect();
        let t = Tensor::new(&shape, data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
        let want = meta
            .get(&format!("digest.{name}"))
            .ok_or_else(|| bad(format!("no digest recorded for `{name}`")))?;
        if format!("{:016x}", tensor_digest(&t)) != *want {
            return Err(Error::Digest(name));
        }
        tensors.insert(name, t);
    }
    let body = c.pos;
    let stored = u64::from_le_bytes(c.take(8, "checksum")?.try_into().expect("8 bytes"));
    if c.pos != bytes.len() {
        return Err(bad("unexpected bytes after the checksum"));
    }
    let mut h = FnvHasher::default();
    h.write(&bytes[..body]);
    if h.finish() != stored {
        return Err(bad("checksum mismatch"));
    }

    let mut cfg_text = String::new();
    for (k, v) in &meta {
        if let Some(key) = k.strip_prefix("config.") {
            cfg_text.push_str(&format!("{key} = {v}\n"));
        }
    }
    let config = TrainConfig::parse(&cfg_text, "checkpoint meta")?;
    let schema_text: String = meta
        .iter()
        .filter(|(k, _)| k.starts_with("schema."))
        .map(|(_, v)| format!("{v}\n"))
        .collect();
    let schema = AuSchema::parse(&schema_text, "checkpoint meta")?;
    if schema.len() != config.num_aus {
        return Err(bad(format!(
            "schema lists {} AUs, config says {}",
            schema.len(),
            config.num_aus
        )));
    }

    let generator = Generator::new(config.generator_config())?;
    let critic = Critic::new(config.critic_config())?;
    let gshapes = generator.parameter_shapes();
    let cshapes = critic.parameter_shapes();
    let mut gen_params = ParameterSet::new();
    let mut critic_params = ParameterSet::new();
    let mut gm = ParameterSet::new();
    let mut gv = ParameterSet::new();
    let mut cm = ParameterSet::new();
    let mut cv = ParameterSet::new();
    let digests = tensors.iter().map(|(k, t)| (k.clone(), tensor_digest(t))).collect();
    fill(&mut gen_params, &gshapes, "gen", &mut tensors)?;
    fill(&mut critic_params, &cshapes, "critic", &mut tensors)?;
    fill(&mut gm, &gshapes, "adam.gen.m", &mut tensors)?;
    fill(&mut gv, &gshapes, "adam.gen.v", &mut tensors)?;
    fill(&mut cm, &cshapes, "adam.critic.m", &mut tensors)?;
    fill(&mut cv, &cshapes, "adam.critic.v", &mut tensors)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor `{extra}`")));
    }

    let adam = |m: ParameterSet<f32>, v: ParameterSet<f32>, step: &str, lr: &str| -> Result<AdamState<f32>> {
        let mut a = AdamState::new(&m, field(&meta, lr)?, config.beta1, config.beta2);
        a.step = field(&meta, step)?;
        a.first = m.iter().map(|(k, t)| (k.clone(), t.clone())).collect();
        a.second = v.iter().map(|(k, t)| (k.clone(), t.clone())).collect();
        Ok(a)
    };
    let gen_adam = adam(gm, gv, "gen_adam_step", "gen_adam_lr")?;
    let critic_adam = adam(cm, cv, "critic_adam_step", "critic_adam_lr")?;

    let seed_hex: String = field(&meta, "rng_seed")?;
    let seed: [u8; 32] = hex::decode(&seed_hex)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| bad("meta field `rng_seed` is malformed"))?;
    let rng = RngState {
        seed,
        stream: field(&meta, "rng_stream")?,
        word_pos: field(&meta, "rng_word_pos")?,
    };

    Ok(Checkpoint {
        meta: CheckpointMeta {
            version,
            epoch: field(&meta, "epoch")?,
            critic_steps: field(&meta, "critic_steps")?,
            gen_steps: field(&meta, "gen_steps")?,
            config,
            schema,
            rng,
            digests,
        },
        model: Model {
            generator,
            critic,
            gen_params,
            critic_params,
        },
        gen_adam,
        critic_adam,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

/// Hex SHA-256 of a file; the model identifier reported by `eval` and the
/// server.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded;

    fn tiny() -> Checkpoint {
        let config = TrainConfig {
            image_size: 32,
            num_aus: 3,
            gen_width: 2,
            gen_residual_blocks: 1,
            critic_width: 2,
            critic_layers: 5,
            seed: 9,
            ..TrainConfig::default()
        };
        let model = Model::init(config.generator_config(), config.critic_config(), &mut seeded(1)).unwrap();
        let mut gen_adam = AdamState::new(&model.gen_params, 1e-4, 0.5, 0.999);
        gen_adam.step = 7;
        gen_adam.first.values_mut().next().unwrap().data_mut()[0] = 0.25;
        let critic_adam = AdamState::new(&model.critic_params, 5e-5, 0.5, 0.999);
        let mut rng = seeded(3);
        let _: u64 = rand::Rng::random(&mut rng);
        Checkpoint {
            meta: CheckpointMeta {
                version: FORMAT_VERSION,
                epoch: 2,
                critic_steps: 35,
                gen_steps: 7,
                config,
                schema: AuSchema::numbered(3).unwrap(),
                rng: RngState::capture(&rng),
                digests: BTreeMap::new(),
            },
            model,
            gen_adam,
            critic_adam,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = tiny();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ganm");
        save(&ck, &p).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back.model.gen_params, ck.model.gen_params);
        assert_eq!(back.model.critic_params, ck.model.critic_params);
        assert_eq!(back.gen_adam, ck.gen_adam);
        assert_eq!(back.critic_adam, ck.critic_adam);
        assert_eq!(back.meta.config, ck.meta.config);
        assert_eq!(back.meta.rng, ck.meta.rng);
        assert_eq!((back.meta.epoch, back.meta.critic_steps, back.meta.gen_steps), (2, 35, 7));
        let q = dir.path().join("b.ganm");
        save(&back, &q).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
        assert_eq!(file_digest(&p).unwrap(), file_digest(&q).unwrap());
        assert_eq!(file_digest(&p).unwrap().len(), 64);
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut a = seeded(5);
        for _ in 0..13 {
            let _: u32 = rand::Rng::random(&mut a);
        }
        let mut b = RngState::capture(&a).restore();
        let x: [u64; 4] = rand::Rng::random(&mut a);
        let y: [u64; 4] = rand::Rng::random(&mut b);
        assert_eq!(x, y);
    }

    #[test]
    fn corrupted_payload_names_the_tensor() {
        let ck = tiny();
        let mut bytes = encode(&ck);
        let name = b"gen/head.color.w";
        let at = bytes.windows(name.len()).position(|w| w == name).unwrap();
        // name, dtype, rank, 4 dims, then the first float.
        let first = at + name.len() + 2 + 16;
        bytes[first] ^= 0x40;
        match decode(&bytes) {
            Err(Error::Digest(t)) => assert_eq!(t, "gen/head.color.w"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn distinct_errors_for_version_truncation_and_checksum() {
        let bytes = encode(&tiny());
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(decode(&v), Err(Error::CheckpointVersion { found: 9, .. })));
        for cut in [2, 10, bytes.len() / 2, bytes.len() - 3] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Truncated(_))), "cut at {cut}");
        }
        let mut m = bytes.clone();
        let at = m.windows(9).position(|w| w == b"epoch = 2").unwrap();
        m[at + 8] = b'3';
        assert!(matches!(decode(&m), Err(Error::Checkpoint(msg)) if msg.contains("checksum")));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(decode(&magic), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn default_model_lists_golden_parameter_counts() {
        let mut ck = tiny();
        ck.meta.config = TrainConfig {
            image_size: 64,
            ..TrainConfig::default()
        };
        ck.meta.schema = AuSchema::default();
        ck.model.generator = Generator::new(ck.meta.config.generator_config()).unwrap();
        ck.model.critic = Critic::new(ck.meta.config.critic_config()).unwrap();
        let text = meta_text(&ck, &[]);
        assert!(text.contains("generator_parameters = 8461888\n"), "{text}");
        assert!(text.contains("critic_parameters = 44749760\n"));
    }
}
