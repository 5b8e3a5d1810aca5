//! `CPKT` checkpoints, little-endian throughout:
//!
//! ```text
//! magic "CPKT" | version u16 | header length u32 | JSON header
//! block count u32
//! per block: name length u16 | name | dtype u8 (0 f32, 1 f64) | rank u8 | dims u32*rank | data
//! ```
//!
//! The header carries the architecture, init record and (optionally) the
//! optimizer scalars and training position. Parameter blocks are followed by
//! Adam moment blocks named `optim/adam/m/<param>` and `optim/adam/v/<param>`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capsule::{CapsNet, CapsNetConfig, InitScheme, CAPSNET_PARAMS};
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::network::{decoder_config_for, Network};
use crate::optim::{Adam, Optimizer, OptimizerKind};
use crate::tensor::Tensor;
use crate::training::{TrainState, Trainer};

pub const MAGIC: &[u8; 4] = b"CPKT";
pub const FORMAT_VERSION: u16 = 1;

/// Storage precision of the parameter blocks. `F64` round-trips exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn code(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

/// Enough of the run to continue it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub state: TrainState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    capsnet: CapsNetConfig,
    decoder_hidden: Vec<usize>,
    init: InitScheme,
    init_seed: u64,
    optimizer: Option<OptimizerRecord>,
    train: Option<TrainRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: Option<Optimizer>,
    pub train: Option<TrainRecord>,
}

impl Checkpoint {
    pub fn from_network(network: Network) -> Self {
        Checkpoint {
            network,
            optimizer: None,
            train: None,
        }
    }

    pub fn from_trainer(t: &Trainer) -> Self {
        Checkpoint {
            network: t.network.clone(),
            optimizer: Some(t.optimizer.clone()),
            train: Some(TrainRecord {
                seed: t.config.seed,
                batch_size: t.config.batch_size,
                learning_rate: t.config.learning_rate,
                state: t.state.clone(),
            }),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W, precision: Precision) -> Result<()> {
        let net = &self.network;
        let header = Header {
            capsnet: net.config().clone(),
            decoder_hidden: net.decoder.config().hidden.clone(),
            init: net.init,
            init_seed: net.init_seed,
            optimizer: self.optimizer.as_ref().map(|o| match o {
                Optimizer::Sgd => OptimizerRecord {
                    kind: OptimizerKind::Sgd,
                    beta1: 0.0,
                    beta2: 0.0,
                    eps: 0.0,
                    t: 0,
                },
                Optimizer::Adam(a) => OptimizerRecord {
                    kind: OptimizerKind::Adam,
                    beta1: a.beta1,
                    beta2: a.beta2,
                    eps: a.eps,
                    t: a.t,
                },
            }),
            train: self.train.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;

        let names = net.param_names();
        let mut blocks: Vec<(String, &Tensor)> = names.iter().cloned().zip(net.params()).collect();
        if let Some(Optimizer::Adam(a)) = &self.optimizer {
            for (name, m) in names.iter().zip(&a.m) {
                blocks.push((format!("optim/adam/m/{name}"), m));
            }
            for (name, v) in names.iter().zip(&a.v) {
                blocks.push((format!("optim/adam/v/{name}"), v));
            }
        }

        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(blocks.len() as u32).to_le_bytes())?;
        for (name, t) in blocks {
            write_block(&mut w, &name, t, precision)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected \"CPKT\"")));
        }
        let version = u16::from_le_bytes(read_array(&mut r, "version")?);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u32::from_le_bytes(read_array(&mut r, "header length")?) as usize;
        let mut json = vec![0u8; header_len];
        read_exact(&mut r, &mut json, "header")?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Format(format!("header: {e}")))?;

        let count = u32::from_le_bytes(read_array(&mut r, "block count")?) as usize;
        let mut blocks = HashMap::with_capacity(count);
        for _ in 0..count {
            let (name, t) = read_block(&mut r)?;
            if blocks.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate block {name:?}")));
            }
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after last block".into()));
        }

        let mut take = |name: &str| {
            blocks
                .remove(name)
                .ok_or_else(|| Error::Format(format!("missing block {name:?}")))
        };
        let capsnet_params = CAPSNET_PARAMS.iter().map(|n| take(n)).collect::<Result<Vec<_>>>()?;
        let capsnet = CapsNet::from_params(header.capsnet.clone(), capsnet_params)?;
        let decoder_config = decoder_config_for(&header.capsnet, header.decoder_hidden.clone());
        let decoder_names = Decoder::new(decoder_config.clone(), InitScheme::Gaussian { std: 0.0 }, 0)?.param_names();
        let decoder_params = decoder_names.iter().map(|n| take(n)).collect::<Result<Vec<_>>>()?;
        let decoder = Decoder::from_params(decoder_config, decoder_params)?;
        let network = Network {
            capsnet,
            decoder,
            init: header.init,
            init_seed: header.init_seed,
        };
        if network.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("non-finite parameter values".into()));
        }

        let optimizer = match header.optimizer {
            None => None,
            Some(rec) if rec.kind == OptimizerKind::Sgd => Some(Optimizer::Sgd),
            Some(rec) => {
                let names = network.param_names();
                let m = names.iter().map(|n| take(&format!("optim/adam/m/{n}"))).collect::<Result<Vec<_>>>()?;
                let v = names.iter().map(|n| take(&format!("optim/adam/v/{n}"))).collect::<Result<Vec<_>>>()?;
                for ((p, m), v) in network.params().iter().zip(&m).zip(&v) {
                    if p.shape() != m.shape() || p.shape() != v.shape() {
                        return Err(Error::Format("optimizer state shape differs from its parameter".into()));
                    }
                }
                Some(Optimizer::Adam(Adam {
                    beta1: rec.beta1,
                    beta2: rec.beta2,
                    eps: rec.eps,
                    t: rec.t,
                    m,
                    v,
                }))
            }
        };
        if let Some(name) = blocks.keys().next() {
            return Err(Error::Format(format!("unexpected block {name:?}")));
        }
        Ok(Checkpoint {
            network,
            optimizer,
            train: header.train,
        })
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>, precision: Precision) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        self.write_to(BufWriter::new(File::create(&tmp)?), precision)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn write_block<W: Write>(w: &mut W, name: &str, t: &Tensor, precision: Precision) -> Result<()> {
    let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("block name too long: {name}")))?;
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank of {name} too large")))?;
    w.write_all(&name_len.to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[precision.code(), rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension of {name} too large")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    match precision {
        Precision::F32 => t.data().iter().for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
        Precision::F64 => t.data().iter().for_each(|&v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_block<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let name_len = u16::from_le_bytes(read_array(r, "block name length")?) as usize;
    let mut name = vec![0u8; name_len];
    read_exact(r, &mut name, "block name")?;
    let name = String::from_utf8(name).map_err(|_| Error::Format("block name is not UTF-8".into()))?;
    let [dtype, rank] = read_array::<2, _>(r, "block dtype")?;
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(read_array(r, "block dims")?) as usize);
    }
    let len: usize = shape.iter().product();
    let width = match dtype {
        0 => 4,
        1 => 8,
        other => return Err(Error::Format(format!("block {name:?}: unknown dtype {other}"))),
    };
    let mut raw = vec![0u8; len * width];
    read_exact(r, &mut raw, &name)?;
    let data = if width == 4 {
        raw.chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect()
    } else {
        raw.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("block {name:?}: {e}")))?;
    Ok((name, t))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("truncated checkpoint while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_array<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    read_exact(r, &mut b, what)?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::TrainConfig;

    fn net() -> Network {
        Network::new(CapsNetConfig::desk(), vec![6], InitScheme::Gaussian { std: 0.3 }, 9).unwrap()
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let c = Checkpoint::from_network(net());
        let mut buf = Vec::new();
        c.write_to(&mut buf, Precision::F64).unwrap();
        assert_eq!(&buf[..4], b"CPKT");
        assert_eq!(Checkpoint::read_from(&buf[..]).unwrap(), c);
    }

    #[test]
    fn f32_round_trip_rounds() {
        let c = Checkpoint::from_network(net());
        let mut buf = Vec::new();
        c.write_to(&mut buf, Precision::F32).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        for (a, b) in c.network.params().iter().zip(back.network.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, f64::from(*x as f32));
            }
        }
    }

    #[test]
    fn trainer_state_survives() {
        let mut t = Trainer::new(net(), TrainConfig::default()).unwrap();
        if let Optimizer::Adam(a) = &mut t.optimizer {
            a.t = 7;
            a.m[0].data_mut()[0] = 0.25;
        }
        t.state.step = 7;
        t.state.batch_in_epoch = 3;
        let c = Checkpoint::from_trainer(&t);
        let mut buf = Vec::new();
        c.write_to(&mut buf, Precision::F64).unwrap();
        let back = Checkpoint::read_from(&buf[..]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.train.unwrap().state.batch_in_epoch, 3);
    }

    #[test]
    fn corrupt_files_rejected() {
        let c = Checkpoint::from_network(net());
        let mut buf = Vec::new();
        c.write_to(&mut buf, Precision::F64).unwrap();
        let err = Checkpoint::read_from(&buf[..buf.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&bad[..]), Err(Error::Format(_))));
        let mut long = buf;
        long.push(0);
        assert!(matches!(Checkpoint::read_from(&long[..]), Err(Error::Format(_))));
    }
}
