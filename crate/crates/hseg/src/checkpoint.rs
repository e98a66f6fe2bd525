//! Model checkpoints.
//!
//! Layout: magic `HSEG`, format version (u32 LE), a length-prefixed
//! config text block describing the architecture, then a tensor table:
//! count, followed per tensor by a length-prefixed name, rank, dims
//! (u32 LE each) and raw f32 LE values. Loading rebuilds the network
//! from the config block and overwrites its parameters, so name and
//! shape mismatches are detected.

use std::path::Path;

use crate::net::{Network, NetworkConfig, Param};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"HSEG";
const VERSION: u32 = 1;

fn config_text(config: &NetworkConfig) -> String {
    let widths: Vec<String> = config.widths.iter().map(|w| w.to_string()).collect();
    format!(
        "input-channels = {}\nclasses = {}\nwidths = {}\nseed = {}\n",
        config.input_channels,
        config.classes,
        widths.join(","),
        config.seed
    )
}

fn parse_config_text(text: &str) -> Result<NetworkConfig> {
    let mut config = NetworkConfig::default();
    let mut found = [false; 4];
    for raw in text.lines() {
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        let (key, value) = trimmed
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("checkpoint config line {trimmed:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        let mut num = |slot: usize| -> Result<usize> {
            found[slot] = true;
            value
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint config {key} = {value:?}")))
        };
        match key {
            "input-channels" => config.input_channels = num(0)?,
            "classes" => config.classes = num(1)?,
            "widths" => {
                found[2] = true;
                config.widths = value
                    .split(',')
                    .map(|part| {
                        part.trim().parse().map_err(|_| {
                            Error::Format(format!("checkpoint config widths = {value:?}"))
                        })
                    })
                    .collect::<Result<_>>()?;
            }
            "seed" => {
                found[3] = true;
                config.seed = value
                    .parse()
                    .map_err(|_| Error::Format(format!("checkpoint config seed = {value:?}")))?;
            }
            _ => return Err(Error::Format(format!("checkpoint config has unknown key {key:?}"))),
        }
    }
    if found.iter().any(|f| !f) {
        return Err(Error::Format("checkpoint config is missing required keys".into()));
    }
    Ok(config)
}

pub fn save(path: &Path, net: &Network) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    let text = config_text(net.config());
    bytes.extend_from_slice(&(text.len() as u32).to_le_bytes());
    bytes.extend_from_slice(text.as_bytes());
    bytes.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for param in net.params() {
        bytes.extend_from_slice(&(param.name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(param.name.as_bytes());
        bytes.extend_from_slice(&(param.tensor.shape().len() as u32).to_le_bytes());
        for &dim in param.tensor.shape() {
            bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in param.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated at byte {} (wanted {n} more)",
                self.path.display(),
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("sized")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("sized")))
            .collect())
    }
}

pub fn load(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Config(format!(
            "cannot read checkpoint {}: {e} (run the train stage first?)",
            path.display()
        ))
    })?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: checkpoint version {version}, this build reads {VERSION}",
            path.display()
        )));
    }
    let text_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(text_len)?)
        .map_err(|_| Error::Format(format!("{}: config block is not UTF-8", path.display())))?;
    let config = parse_config_text(text)?;
    let mut net = Network::new(config)?;

    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format(format!("{}: tensor name is not UTF-8", path.display())))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let len = shape.iter().product();
        let data = r.f32s(len)?;
        params.push(Param { name, tensor: Tensor::new(shape, data)? });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{}: {} trailing bytes after tensor table",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    net.set_params(params)?;
    Ok(net)
}
