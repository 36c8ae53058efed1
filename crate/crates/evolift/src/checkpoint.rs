//! Versioned binary snapshots of a training run: model parameters,
//! optimizer moments, the epoch counter, the training RNG state, and the
//! exact configuration text. The format is a fixed header followed by
//! length-prefixed records sorted by key, so identical state always
//! produces identical bytes.
//!
//! Record layout, all little-endian: key length (u64) and UTF-8 key, rank
//! (u64) and shape extents (u64 each), then one f64 per element. Integer
//! and text payloads ride in the same record shape via bit-exact casts, so
//! a single reader handles every key.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::optim::OptState;
use crate::params::ParamSet;

pub const MAGIC: [u8; 4] = *b"EVOL";
pub const VERSION: u32 = 1;

/// In-memory form of one snapshot. `tensors` holds the `param/...` and
/// `opt/{m,v,vhat}/...` records keyed by canonical parameter path.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    /// Completed training epochs.
    pub epoch: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub opt_step: u64,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

fn u64s_as_f64s(words: &[u64]) -> Vec<f64> {
    words.iter().map(|w| f64::from_bits(*w)).collect()
}

fn f64s_as_u64s(vals: &[f64]) -> Vec<u64> {
    vals.iter().map(|v| v.to_bits()).collect()
}

/// Packs UTF-8 text into the uniform record payload: the byte length, then
/// the bytes in little-endian u64 chunks (zero-padded at the tail).
fn string_to_payload(s: &str) -> Vec<f64> {
    let bytes = s.as_bytes();
    let mut words = Vec::with_capacity(1 + bytes.len().div_ceil(8));
    words.push(bytes.len() as u64);
    for chunk in bytes.chunks(8) {
        let mut buf = [0u8; 8];
        buf[..chunk.len()].copy_from_slice(chunk);
        words.push(u64::from_le_bytes(buf));
    }
    u64s_as_f64s(&words)
}

fn string_from_payload(payload: &[f64]) -> anyhow::Result<String> {
    let words = f64s_as_u64s(payload);
    let Some((&len, chunks)) = words.split_first() else {
        bail!("text record is empty");
    };
    let len = len as usize;
    if len > chunks.len() * 8 {
        bail!("text record claims {len} bytes but carries {}", chunks.len() * 8);
    }
    let mut bytes = Vec::with_capacity(len);
    for w in chunks {
        bytes.extend_from_slice(&w.to_le_bytes());
    }
    bytes.truncate(len);
    String::from_utf8(bytes).context("text record is not UTF-8")
}

impl Checkpoint {
    /// Snapshots the live training state. The RNG argument is the master
    /// training-loop generator; its seed and stream position are enough to
    /// resume it exactly.
    pub fn capture(
        config: &TrainConfig,
        ps: &ParamSet,
        opt: &OptState,
        epoch: u64,
        rng: &ChaCha8Rng,
    ) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for r in ps.refs() {
            let i = r.index();
            let name = ps.name(r);
            let shape = ps.shape(r).to_vec();
            tensors.insert(format!("param/{name}"), (shape.clone(), ps.data(r).to_vec()));
            tensors.insert(format!("opt/m/{name}"), (shape.clone(), opt.m[i].clone()));
            tensors.insert(format!("opt/v/{name}"), (shape.clone(), opt.v[i].clone()));
            tensors.insert(format!("opt/vhat/{name}"), (shape, opt.vhat[i].clone()));
        }
        Checkpoint {
            config_toml: config.to_toml(),
            epoch,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            opt_step: opt.step,
            tensors,
        }
    }

    pub fn config(&self) -> anyhow::Result<TrainConfig> {
        TrainConfig::from_toml(&self.config_toml).context("checkpoint carries an invalid config")
    }

    /// Rebuilds the master training RNG at its captured position.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    /// Copies stored parameter values into a live set. The checkpoint may
    /// carry extra keys, but every live parameter must be present with its
    /// exact shape.
    pub fn restore_params(&self, ps: &mut ParamSet) -> anyhow::Result<()> {
        let refs: Vec<_> = ps.refs().collect();
        for r in refs {
            let key = format!("param/{}", ps.name(r));
            let Some((shape, data)) = self.tensors.get(&key) else {
                bail!("checkpoint is missing {key}");
            };
            if shape != ps.shape(r) {
                bail!(
                    "checkpoint shape {:?} for {key} does not match the live {:?}",
                    shape,
                    ps.shape(r)
                );
            }
            ps.data_mut(r).copy_from_slice(data);
        }
        Ok(())
    }

    /// Rebuilds the optimizer state for a live parameter set.
    pub fn restore_opt(&self, ps: &ParamSet) -> anyhow::Result<OptState> {
        let mut opt = OptState::new(ps);
        opt.step = self.opt_step;
        for r in ps.refs() {
            let i = r.index();
            let name = ps.name(r);
            for (kind, slot) in [("m", &mut opt.m), ("v", &mut opt.v), ("vhat", &mut opt.vhat)] {
                let key = format!("opt/{kind}/{name}");
                let Some((shape, data)) = self.tensors.get(&key) else {
                    bail!("checkpoint is missing {key}");
                };
                if shape != ps.shape(r) {
                    bail!("checkpoint shape {shape:?} for {key} does not match the live model");
                }
                slot[i].copy_from_slice(data);
            }
        }
        Ok(opt)
    }

    /// Every record in writing order: metadata first by key, then tensors.
    fn records(&self) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        let mut all = self.tensors.clone();
        all.insert("config/toml".into(), {
            let payload = string_to_payload(&self.config_toml);
            (vec![payload.len()], payload)
        });
        all.insert("meta/epoch".into(), (vec![1], u64s_as_f64s(&[self.epoch])));
        let seed_words: Vec<u64> = self
            .rng_seed
            .chunks(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        all.insert("meta/rng_seed".into(), (vec![4], u64s_as_f64s(&seed_words)));
        let pos = [self.rng_word_pos as u64, (self.rng_word_pos >> 64) as u64];
        all.insert("meta/rng_word_pos".into(), (vec![2], u64s_as_f64s(&pos)));
        all.insert("opt/step".into(), (vec![1], u64s_as_f64s(&[self.opt_step])));
        all
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let file = std::fs::File::create(path)
            .with_context(|| format!("creating checkpoint {}", path.display()))?;
        let mut w = BufWriter::new(file);
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for (key, (shape, data)) in self.records() {
            w.write_all(&(key.len() as u64).to_le_bytes())?;
            w.write_all(key.as_bytes())?;
            w.write_all(&(shape.len() as u64).to_le_bytes())?;
            for extent in shape {
                w.write_all(&(extent as u64).to_le_bytes())?;
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush().context("writing checkpoint")
    }

    pub fn load(path: &Path) -> anyhow::Result<Checkpoint> {
        let file = std::fs::File::open(path)
            .with_context(|| format!("opening checkpoint {}", path.display()))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).context("reading checkpoint header")?;
        if magic != MAGIC {
            bail!("not a checkpoint file: bad magic {magic:?}");
        }
        let mut ver = [0u8; 4];
        r.read_exact(&mut ver).context("reading checkpoint version")?;
        let ver = u32::from_le_bytes(ver);
        if ver != VERSION {
            bail!("unsupported checkpoint version {ver} (this build reads {VERSION})");
        }

        let mut records = BTreeMap::new();
        loop {
            let mut len_buf = [0u8; 8];
            match r.read_exact(&mut len_buf) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e).context("reading record key length"),
            }
            let key_len = u64::from_le_bytes(len_buf) as usize;
            let mut key = vec![0u8; key_len];
            r.read_exact(&mut key).context("reading record key")?;
            let key = String::from_utf8(key).context("record key is not UTF-8")?;
            r.read_exact(&mut len_buf).with_context(|| format!("reading rank of {key}"))?;
            let rank = u64::from_le_bytes(len_buf) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut len_buf).with_context(|| format!("reading shape of {key}"))?;
                shape.push(u64::from_le_bytes(len_buf) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                r.read_exact(&mut len_buf)
                    .with_context(|| format!("reading payload of {key}"))?;
                data.push(f64::from_le_bytes(len_buf));
            }
            if records.insert(key.clone(), (shape, data)).is_some() {
                bail!("duplicate record {key}");
            }
        }

        let mut take = |key: &str| -> anyhow::Result<(Vec<usize>, Vec<f64>)> {
            records.remove(key).with_context(|| format!("checkpoint is missing {key}"))
        };
        let config_toml = string_from_payload(&take("config/toml")?.1)
            .context("decoding config/toml record")?;
        let epoch = f64s_as_u64s(&take("meta/epoch")?.1)[0];
        let seed_words = f64s_as_u64s(&take("meta/rng_seed")?.1);
        if seed_words.len() != 4 {
            bail!("meta/rng_seed must hold 4 words, found {}", seed_words.len());
        }
        let mut rng_seed = [0u8; 32];
        for (i, w) in seed_words.iter().enumerate() {
            rng_seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
        }
        let pos_words = f64s_as_u64s(&take("meta/rng_word_pos")?.1);
        if pos_words.len() != 2 {
            bail!("meta/rng_word_pos must hold 2 words, found {}", pos_words.len());
        }
        let rng_word_pos = pos_words[0] as u128 | (pos_words[1] as u128) << 64;
        let opt_step = f64s_as_u64s(&take("opt/step")?.1)[0];

        Ok(Checkpoint { config_toml, epoch, rng_seed, rng_word_pos, opt_step, tensors: records })
    }
}
