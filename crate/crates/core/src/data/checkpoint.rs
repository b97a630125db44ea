//! Checkpoint layout: a UTF-8 header followed by a little-endian f64 payload.
//!
//! ```text
//! CAPS
//! version 1
//! config <n>          n lines of key=value (architecture echo)
//! meta <m>            m lines of key=value (optimizer and rng scalars)
//! tensors <t>         t lines of "<name> f64 <d0,d1,..> <byte offset>"
//! end
//! <payload>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::BatchNormState;
use crate::config::{network_from_pairs, network_pairs};
use crate::error::{Error, Result};
use crate::model::{Network, Param};
use crate::tensor::Tensor;
use crate::training::{AdamState, CurriculumSchedule, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: &str = "CAPS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Vec<(String, String)>,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::Format(format!("checkpoint meta lacks {key}")))?;
        raw.parse()
            .map_err(|_| Error::Format(format!("checkpoint meta {key} = {raw:?} is malformed")))
    }
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '=') {
        return Err(Error::Format(format!(
            "{kind} {s:?} cannot be stored in a checkpoint header"
        )));
    }
    Ok(())
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut header = format!("{CHECKPOINT_MAGIC}\nversion {CHECKPOINT_VERSION}\n");
    for (section, pairs) in [("config", &ckpt.config), ("meta", &ckpt.meta)] {
        let _ = writeln!(header, "{section} {}", pairs.len());
        for (k, v) in pairs {
            check_token("key", k)?;
            if v.contains('\n') {
                return Err(Error::Format(format!("value of {k} spans lines")));
            }
            let _ = writeln!(header, "{k}={v}");
        }
    }
    let _ = writeln!(header, "tensors {}", ckpt.tensors.len());
    let mut offset = 0usize;
    for (name, t) in &ckpt.tensors {
        check_token("tensor name", name)?;
        let dims = t.dims().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(header, "{name} f64 [{dims}] {offset}");
        offset += t.numel() * 8;
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.reserve(offset);
    for (_, t) in &ckpt.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Lines<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint header truncated".into()))?;
        self.pos += end + 1;
        self.line += 1;
        std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::Format(format!("checkpoint header line {} is not UTF-8", self.line)))
    }

    fn err(&self, msg: impl std::fmt::Display) -> Error {
        Error::Format(format!("checkpoint header line {}: {msg}", self.line))
    }

    fn counted(&mut self, section: &str) -> Result<usize> {
        let l = self.next()?;
        l.strip_prefix(section)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| self.err(format!("expected \"{section} <count>\", got {l:?}")))
    }

    fn pairs(&mut self, section: &str) -> Result<Vec<(String, String)>> {
        let n = self.counted(section)?;
        (0..n)
            .map(|_| {
                let l = self.next()?;
                l.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| self.err(format!("expected key=value, got {l:?}")))
            })
            .collect()
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut lines = Lines { bytes, pos: 0, line: 0 };
    let magic = lines
        .next()
        .map_err(|_| Error::Format(format!("not a checkpoint: missing {CHECKPOINT_MAGIC} magic")))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "not a checkpoint: expected magic {CHECKPOINT_MAGIC}, found {magic:?}"
        )));
    }
    let version = lines.counted("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let config = lines.pairs("config")?;
    let meta = lines.pairs("meta")?;
    let n = lines.counted("tensors")?;
    let mut directory = Vec::with_capacity(n);
    for _ in 0..n {
        let l = lines.next()?;
        let fields: Vec<&str> = l.split(' ').collect();
        let parsed = match fields[..] {
            [name, "f64", dims, offset] => dims
                .strip_prefix('[')
                .and_then(|d| d.strip_suffix(']'))
                .and_then(|d| {
                    if d.is_empty() {
                        Some(Vec::new())
                    } else {
                        d.split(',').map(|v| v.parse().ok()).collect::<Option<Vec<usize>>>()
                    }
                })
                .zip(offset.parse::<usize>().ok())
                .map(|(dims, off)| (name.to_string(), dims, off)),
            _ => None,
        };
        directory.push(parsed.ok_or_else(|| lines.err(format!("bad tensor entry {l:?}")))?);
    }
    if lines.next()? != "end" {
        return Err(lines.err("expected end"));
    }
    let payload = &bytes[lines.pos..];
    let mut expected_offset = 0;
    let mut tensors = Vec::with_capacity(n);
    for (name, dims, off) in directory {
        let count: usize = dims.iter().product();
        if off != expected_offset {
            return Err(Error::Format(format!(
                "tensor {name} at offset {off}, expected {expected_offset}"
            )));
        }
        let raw = payload
            .get(off..off + count * 8)
            .ok_or_else(|| Error::Format(format!("checkpoint truncated inside tensor {name}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        expected_offset = off + count * 8;
        tensors.push((name, Tensor::new(dims, data)?));
    }
    if payload.len() != expected_offset {
        return Err(Error::Format(format!(
            "checkpoint payload has {} bytes, directory describes {expected_offset}",
            payload.len()
        )));
    }
    Ok(Checkpoint { config, meta, tensors })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, write_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&std::fs::read(path)?)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

/// Captures parameters, batch-norm statistics and, when given, the
/// optimizer, schedule and rng state of `trainer`.
pub fn network_checkpoint(net: &Network, trainer: Option<&Trainer>) -> Checkpoint {
    let mut tensors: Vec<(String, Tensor)> = net
        .params()
        .iter()
        .map(|p| (format!("param/{}", p.name), p.value.clone().with_requires_grad(false)))
        .collect();
    for (name, st) in net.batchnorm_states() {
        let c = st.channels();
        for (kind, data) in [("mean", &st.running_mean), ("var", &st.running_var)] {
            let t = Tensor::new(vec![c], data.clone()).expect("running statistic length");
            tensors.push((format!("bn/{name}/{kind}"), t));
        }
    }
    let mut meta = Vec::new();
    if let Some(tr) = trainer {
        for (p, (m, v)) in net.params().iter().zip(tr.adam.m.iter().zip(&tr.adam.v)) {
            let dims = p.value.dims().to_vec();
            tensors.push((
                format!("adam_m/{}", p.name),
                Tensor::new(dims.clone(), m.clone()).expect("moment shape"),
            ));
            tensors.push((
                format!("adam_v/{}", p.name),
                Tensor::new(dims, v.clone()).expect("moment shape"),
            ));
        }
        meta = vec![
            ("epoch".to_string(), tr.epoch.to_string()),
            ("adam_t".to_string(), tr.adam.t.to_string()),
            ("positives".to_string(), tr.schedule.positives.to_string()),
            ("negatives".to_string(), tr.schedule.negatives.to_string()),
            ("rng_seed".to_string(), hex(&tr.rng.get_seed())),
            ("rng_stream".to_string(), tr.rng.get_stream().to_string()),
            ("rng_word_pos".to_string(), tr.rng.get_word_pos().to_string()),
        ];
    }
    Checkpoint {
        config: network_pairs(&net.config),
        meta,
        tensors,
    }
}

/// Rebuilds the network stored in `ckpt`.
pub fn restore_network(ckpt: &Checkpoint) -> Result<Network> {
    let config = network_from_pairs(&ckpt.config)?;
    let template = crate::model::build_network(&config, 0)?;
    let params = template
        .params()
        .iter()
        .map(|p| {
            let t = ckpt.tensor(&format!("param/{}", p.name))?;
            if t.dims() != p.value.dims() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, configuration implies {:?}",
                    p.name,
                    t.dims(),
                    p.value.dims()
                )));
            }
            Ok(Param {
                name: p.name.clone(),
                value: t.clone().with_requires_grad(true),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bn = template
        .batchnorm_states()
        .iter()
        .map(|(name, st)| {
            let mean = ckpt.tensor(&format!("bn/{name}/mean"))?;
            let var = ckpt.tensor(&format!("bn/{name}/var"))?;
            if mean.numel() != st.channels() || var.numel() != st.channels() {
                return Err(Error::Format(format!(
                    "batch-norm {name} statistics have the wrong length"
                )));
            }
            Ok((
                name.clone(),
                BatchNormState {
                    running_mean: mean.data().to_vec(),
                    running_var: var.data().to_vec(),
                    ..st.clone()
                },
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let expected = params.len() + 2 * bn.len();
    let stored = ckpt
        .tensors
        .iter()
        .filter(|(n, _)| n.starts_with("param/") || n.starts_with("bn/"))
        .count();
    if stored != expected {
        return Err(Error::Format(format!(
            "checkpoint holds {stored} parameter/statistic tensors, configuration implies {expected}"
        )));
    }
    Network::from_parts(config, params, bn)
}

/// Restores optimizer, schedule and rng state saved alongside `net`;
/// `None` when the checkpoint carries no training state.
pub fn restore_trainer(ckpt: &Checkpoint, net: &Network, config: TrainConfig) -> Result<Option<Trainer>> {
    if ckpt.meta("adam_t").is_none() {
        return Ok(None);
    }
    let mut adam = AdamState::new(config.adam, net.params());
    for (i, p) in net.params().iter().enumerate() {
        adam.m[i] = ckpt.tensor(&format!("adam_m/{}", p.name))?.data().to_vec();
        adam.v[i] = ckpt.tensor(&format!("adam_v/{}", p.name))?.data().to_vec();
    }
    adam.t = ckpt.meta_parsed("adam_t")?;
    let seed_hex: String = ckpt.meta_parsed("rng_seed")?;
    let seed = unhex(&seed_hex).ok_or_else(|| Error::Format("checkpoint rng_seed is malformed".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(ckpt.meta_parsed("rng_stream")?);
    rng.set_word_pos(ckpt.meta_parsed("rng_word_pos")?);
    Ok(Some(Trainer {
        schedule: CurriculumSchedule {
            switch_epoch: config.switch_epoch,
            positives: ckpt.meta_parsed("positives")?,
            negatives: ckpt.meta_parsed("negatives")?,
        },
        config,
        adam,
        epoch: ckpt.meta_parsed("epoch")?,
        rng,
    }))
}
