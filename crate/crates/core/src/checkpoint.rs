//! Self-describing checkpoint files.
//!
//! Layout: a UTF-8 text header terminated by a line `END`, followed by the
//! raw little-endian `f64` data of every array in shape-table order.
//!
//! ```text
//! SIGATTN-CHECKPOINT 1
//! config_hash <hex>
//! epoch <n>
//! dev <top1> <mrr> <top3> <count>
//! config <json>
//! vocab <json>
//! domains <json>
//! arrays <k>
//! <name> <rows> <cols>      (k lines)
//! END
//! ```

use std::fs;
use std::path::Path;

use numcore::Array;

use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::{Model, ModelParams};
use crate::trainer::TrainConfig;
use crate::vocab::Vocabulary;

pub const MAGIC: &str = "SIGATTN-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub dev: Metrics,
    pub vocab: Vocabulary,
    pub domains: Vec<String>,
    pub params: ModelParams,
}

fn bad(message: impl Into<String>) -> Error {
    Error::Checkpoint(message.into())
}

impl Checkpoint {
    pub fn new(config: TrainConfig, epoch: usize, dev: Metrics, vocab: Vocabulary, domains: Vec<String>, model: Model) -> Self {
        Self {
            version: FORMAT_VERSION,
            config_hash: config.hash(),
            config,
            epoch,
            dev,
            vocab,
            domains,
            params: model.params,
        }
    }

    pub fn model(&self) -> Model {
        let config = self
            .config
            .model_config(self.vocab.len(), self.domains.len())
            .expect("validated when the checkpoint was built or read");
        Model {
            config,
            params: self.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.params.named();
        let mut header = format!("{MAGIC} {}\n", self.version);
        header += &format!("config_hash {}\n", self.config_hash);
        header += &format!("epoch {}\n", self.epoch);
        header += &format!(
            "dev {:?} {:?} {:?} {}\n",
            self.dev.top1, self.dev.mrr, self.dev.top3, self.dev.count
        );
        header += &format!("config {}\n", json(&self.config));
        header += &format!("vocab {}\n", json(&self.vocab));
        header += &format!("domains {}\n", json(&self.domains));
        header += &format!("arrays {}\n", named.len());
        for (name, a) in &named {
            header += &format!("{name} {} {}\n", a.rows(), a.cols());
        }
        header += "END\n";
        let mut bytes = header.into_bytes();
        for (_, a) in named {
            for v in a.as_slice() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let end = find_header_end(bytes).ok_or_else(|| bad("missing END line"))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
        let mut lines = header.lines();
        let mut field = |key: &str| -> Result<&str> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{key}` line")))?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
        };
        let version: u32 = field(MAGIC)?.parse().map_err(|_| bad("bad format version"))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let config_hash = field("config_hash")?.to_string();
        let epoch = field("epoch")?.parse().map_err(|_| bad("bad epoch"))?;
        let dev_fields: Vec<&str> = field("dev")?.split(' ').collect();
        let dev = match dev_fields.as_slice() {
            [t1, mrr, t3, count] => {
                let f = |s: &str| s.parse::<f64>().map_err(|_| bad("bad dev metric"));
                Metrics {
                    top1: f(t1)?,
                    mrr: f(mrr)?,
                    top3: f(t3)?,
                    count: count.parse().map_err(|_| bad("bad dev count"))?,
                }
            }
            _ => return Err(bad("dev line needs four fields")),
        };
        let config: TrainConfig = parse_json("config", field("config")?)?;
        config.validate()?;
        if config.hash() != config_hash {
            return Err(bad("config hash does not match the stored config"));
        }
        let vocab: Vocabulary = parse_json("vocab", field("vocab")?)?;
        let domains: Vec<String> = parse_json("domains", field("domains")?)?;
        let count: usize = field("arrays")?.parse().map_err(|_| bad("bad array count"))?;
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines.next().ok_or_else(|| bad("truncated shape table"))?;
            let parts: Vec<&str> = line.split(' ').collect();
            let [name, rows, cols] = parts.as_slice() else {
                return Err(bad(format!("bad shape line `{line}`")));
            };
            let dim = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad shape line `{line}`")));
            shapes.push((name.to_string(), dim(rows)?, dim(cols)?));
        }
        if lines.next().is_some() {
            return Err(bad("unexpected header lines after the shape table"));
        }

        let mut data = &bytes[end + "END\n".len()..];
        let mut arrays = Vec::with_capacity(count);
        for (name, rows, cols) in shapes {
            let len = rows * cols * 8;
            if data.len() < len {
                return Err(bad(format!("data for `{name}` is truncated")));
            }
            let values = data[..len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[len..];
            arrays.push((name, Array::from_vec(rows, cols, values)?));
        }
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes", data.len())));
        }
        let model_config = config.model_config(vocab.len(), domains.len())?;
        let params = ModelParams::from_named(&model_config, arrays)?;
        Ok(Self {
            version,
            config,
            config_hash,
            epoch,
            dev,
            vocab,
            domains,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Byte offset of the `END\n` line.
fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let mut start = 0;
    while start < bytes.len() {
        let nl = bytes[start..].iter().position(|&b| b == b'\n')? + start;
        if &bytes[start..nl] == b"END" {
            return Some(start);
        }
        start = nl + 1;
    }
    None
}

fn parse_json<T: serde::de::DeserializeOwned>(key: &str, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| bad(format!("{key}: {e}")))
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("serializable")
}
