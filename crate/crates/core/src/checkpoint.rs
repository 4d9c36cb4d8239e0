//! Single-file checkpoints: magic, format version, a JSON header, then raw
//! little-endian `f32` blocks for every parameter and optimizer moment.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::discriminator::Discriminator;
use crate::generator::Generator;
use crate::nn::{Adam, Params};
use crate::training::{TrainState, TrainingLog};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TRAJGAN\0";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint does not match its config: {0}")]
    Mismatch(String),
    #[error("checkpoint value not representable as f32 in block {0}")]
    NotF32(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMeta {
    pub group: String,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Random streams are derived from `(root_seed, name, epoch)`, so the root
/// seed and next epoch fully determine the remaining randomness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub root_seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub config: ExperimentConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub opt_g_step: u64,
    pub opt_d_step: u64,
    pub log: TrainingLog,
    pub blocks: Vec<BlockMeta>,
}

fn data(p: &Params) -> Vec<&Vec<f64>> {
    p.blocks.iter().map(|b| &b.data).collect()
}

fn groups(state: &TrainState) -> Vec<(&'static str, &Params, Vec<&Vec<f64>>)> {
    vec![
        ("generator", &state.gen.params, data(&state.gen.params)),
        ("discriminator", &state.disc.params, data(&state.disc.params)),
        ("opt_g.m", &state.gen.params, state.opt_g.m.iter().collect()),
        ("opt_g.v", &state.gen.params, state.opt_g.v.iter().collect()),
        ("opt_d.m", &state.disc.params, state.opt_d.m.iter().collect()),
        ("opt_d.v", &state.disc.params, state.opt_d.v.iter().collect()),
    ]
}

pub fn save(path: impl AsRef<Path>, config: &ExperimentConfig, state: &TrainState) -> Result<(), CheckpointError> {
    let gs = groups(state);
    let blocks = gs
        .iter()
        .flat_map(|(group, params, _)| {
            params.blocks.iter().map(move |b| BlockMeta {
                group: group.to_string(),
                name: b.name.clone(),
                rows: b.rows,
                cols: b.cols,
            })
        })
        .collect();
    let header = Header {
        version: FORMAT_VERSION,
        config: config.clone(),
        epoch: state.epoch,
        rng: RngState {
            root_seed: config.seed,
            next_epoch: state.epoch,
        },
        opt_g_step: state.opt_g.step,
        opt_d_step: state.opt_d.step,
        log: state.log.clone(),
        blocks,
    };
    let json = serde_json::to_vec(&header)?;
    let tmp = path.as_ref().with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (group, params, data) in &gs {
            for (b, d) in params.blocks.iter().zip(data) {
                for &x in d.iter() {
                    let f = x as f32;
                    if f as f64 != x && x.is_finite() {
                        return Err(CheckpointError::NotF32(format!("{group}/{}", b.name)));
                    }
                    w.write_all(&f.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads only the header.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    read_header_from(&mut r)
}

fn read_header_from(r: &mut impl Read) -> Result<Header, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.version != version {
        return Err(CheckpointError::Mismatch("header version differs from file version".into()));
    }
    Ok(header)
}

/// Fresh models shaped by `config`, with parameters from the `"init"` stream.
pub fn init_state(config: &ExperimentConfig) -> Result<TrainState, CheckpointError> {
    let mut rng = crate::seeding::stream(config.seed, "init", 0);
    let gen = Generator::new(config.generator.clone(), &mut rng).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    let disc = Discriminator::new(config.discriminator.clone(), &mut rng).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    Ok(TrainState::new(gen, disc, config.train.adam))
}

/// Loads a checkpoint; the embedded config rebuilds the models.
pub fn load(path: impl AsRef<Path>) -> Result<(ExperimentConfig, TrainState), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header_from(&mut r)?;
    let config = header.config.clone();
    config.validate().map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    // shapes come from the config; values are overwritten below
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut gen = Generator::new(config.generator.clone(), &mut rng).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    let mut disc = Discriminator::new(config.discriminator.clone(), &mut rng).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    let mut opt_g = Adam::new(&gen.params, config.train.adam);
    let mut opt_d = Adam::new(&disc.params, config.train.adam);
    opt_g.step = header.opt_g_step;
    opt_d.step = header.opt_d_step;
    let expected: Vec<(&str, &Params)> = vec![
        ("generator", &gen.params),
        ("discriminator", &disc.params),
        ("opt_g.m", &gen.params),
        ("opt_g.v", &gen.params),
        ("opt_d.m", &disc.params),
        ("opt_d.v", &disc.params),
    ];
    let want: Vec<BlockMeta> = expected
        .iter()
        .flat_map(|(g, p)| {
            p.blocks.iter().map(move |b| BlockMeta {
                group: g.to_string(),
                name: b.name.clone(),
                rows: b.rows,
                cols: b.cols,
            })
        })
        .collect();
    if want != header.blocks {
        return Err(CheckpointError::Mismatch("parameter blocks differ from the config's architecture".into()));
    }
    let mut values: Vec<Vec<f64>> = Vec::with_capacity(want.len());
    for m in &want {
        let mut buf = vec![0u8; m.rows * m.cols * 4];
        r.read_exact(&mut buf)?;
        values.push(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect());
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(CheckpointError::Mismatch("trailing bytes after the last block".into()));
    }
    let mut it = values.into_iter();
    for b in gen.params.blocks.iter_mut() {
        b.data = it.next().expect("counted");
    }
    for b in disc.params.blocks.iter_mut() {
        b.data = it.next().expect("counted");
    }
    for dst in [&mut opt_g.m, &mut opt_g.v] {
        for d in dst.iter_mut() {
            *d = it.next().expect("counted");
        }
    }
    for dst in [&mut opt_d.m, &mut opt_d.v] {
        for d in dst.iter_mut() {
            *d = it.next().expect("counted");
        }
    }
    let state = TrainState {
        gen,
        disc,
        opt_g,
        opt_d,
        epoch: header.epoch,
        log: header.log,
    };
    Ok((config, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::tiny();
        let mut state = init_state(&cfg).unwrap();
        state.opt_g.step = 7;
        state.opt_g.m[0][0] = 0.25;
        state.epoch = 3;
        let p = dir.path().join("c.ckpt");
        save(&p, &cfg, &state).unwrap();
        let (c2, s2) = load(&p).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(s2.gen.params, state.gen.params);
        assert_eq!(s2.disc.params, state.disc.params);
        assert_eq!(s2.opt_g, state.opt_g);
        assert_eq!(s2.opt_d, state.opt_d);
        assert_eq!(s2.epoch, 3);
        assert_eq!(read_header(&p).unwrap().rng, RngState { root_seed: 0, next_epoch: 3 });
    }

    #[test]
    fn rejects_wrong_version_and_magic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::tiny();
        let p = dir.path().join("c.ckpt");
        save(&p, &cfg, &init_state(&cfg).unwrap()).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[8] = 99;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load(&p), Err(CheckpointError::Version { found: 99, .. })));
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load(&p), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::tiny();
        let p = dir.path().join("c.ckpt");
        save(&p, &cfg, &init_state(&cfg).unwrap()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load(&p).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        std::fs::write(&p, &longer).unwrap();
        assert!(matches!(load(&p), Err(CheckpointError::Mismatch(_))));
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let cfg = ExperimentConfig::tiny();
        let a = init_state(&cfg).unwrap();
        let b = init_state(&cfg).unwrap();
        assert_eq!(a.gen.params.fingerprint(), b.gen.params.fingerprint());
        let mut c2 = cfg.clone();
        c2.seed = 1;
        assert_ne!(init_state(&c2).unwrap().gen.params.fingerprint(), a.gen.params.fingerprint());
    }
}
