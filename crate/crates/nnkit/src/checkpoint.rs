//! Checkpoint archive: a textual header followed by named little-endian
//! `f64` arrays and a SHA-256 trailer over the binary section.
//!
//! ```text
//! nnkit-checkpoint
//! format_version=1
//! architecture=256>silu:128>identity:3
//! config_hash=...
//! end
//! <u32 count> { <u32 name_len> <name> <u32 ndim> <u64 dim>* <f64 data>* }* <32-byte digest>
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::error::{NnError, Result};
use crate::mlp::{Architecture, Dense, Mlp};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "nnkit-checkpoint";
const END: &str = "end";

/// Free-form `key=value` pairs stored in the header. Keys and values must not
/// contain newlines; keys must not contain `=`.
pub type Metadata = BTreeMap<String, String>;

/// Short hex digest used to tie artifacts to the configuration that made them.
pub fn config_hash(text: &str) -> String {
    let d = Sha256::digest(text.as_bytes());
    hex::encode(&d[..8])
}

pub fn encode(model: &Mlp, metadata: &Metadata) -> Result<Vec<u8>> {
    let mut header = format!(
        "{MAGIC}\nformat_version={FORMAT_VERSION}\narchitecture={}\n",
        model.architecture()
    );
    for (k, v) in metadata {
        if k.contains('=')
            || k.contains('\n')
            || v.contains('\n')
            || k == "format_version"
            || k == "architecture"
        {
            return Err(NnError::Format(format!("invalid metadata key/value `{k}`")));
        }
        header.push_str(&format!("{k}={v}\n"));
    }
    header.push_str(END);
    header.push('\n');

    let mut body = Vec::new();
    let layers = model.layers();
    body.extend_from_slice(&((layers.len() * 2) as u32).to_le_bytes());
    for (i, l) in layers.iter().enumerate() {
        push_array(
            &mut body,
            &format!("layer{i}.weight"),
            &[l.weight.nrows(), l.weight.ncols()],
            l.weight.iter(),
        );
        push_array(
            &mut body,
            &format!("layer{i}.bias"),
            &[l.bias.len()],
            l.bias.iter(),
        );
    }
    let digest = Sha256::digest(&body);
    let mut out = header.into_bytes();
    out.extend_from_slice(&body);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn push_array<'a>(
    buf: &mut Vec<u8>,
    name: &str,
    dims: &[usize],
    data: impl Iterator<Item = &'a f64>,
) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| NnError::Format("truncated array section".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Mlp, Metadata)> {
    // Header: lines up to and including `end`.
    let mut meta = Metadata::new();
    let mut pos = 0;
    let mut first = true;
    let mut version = None;
    let mut arch: Option<Architecture> = None;
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| NnError::Format("truncated header".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl])
            .map_err(|_| NnError::Format("header is not UTF-8".into()))?;
        pos += nl + 1;
        if first {
            if line != MAGIC {
                return Err(NnError::Format("missing checkpoint magic".into()));
            }
            first = false;
            continue;
        }
        if line == END {
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| NnError::Format(format!("malformed header line `{line}`")))?;
        match k {
            "format_version" => {
                let ver: u32 = v
                    .parse()
                    .map_err(|_| NnError::Format(format!("bad format version `{v}`")))?;
                if ver != FORMAT_VERSION {
                    return Err(NnError::Format(format!(
                        "unsupported format version {ver} (expected {FORMAT_VERSION})"
                    )));
                }
                version = Some(ver);
            }
            "architecture" => arch = Some(v.parse()?),
            _ => {
                meta.insert(k.to_string(), v.to_string());
            }
        }
    }
    if version.is_none() {
        return Err(NnError::Format("missing format_version".into()));
    }
    let arch = arch.ok_or_else(|| NnError::Format("missing architecture".into()))?;

    if bytes.len() < pos + 32 {
        return Err(NnError::Format("truncated checkpoint".into()));
    }
    let (body, digest) = bytes[pos..].split_at(bytes.len() - pos - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(NnError::Format(
            "checksum mismatch (corrupt or truncated file)".into(),
        ));
    }

    let mut r = Reader { buf: body, pos: 0 };
    let count = r.u32()? as usize;
    if count != arch.layers.len() * 2 {
        return Err(NnError::Format(format!(
            "expected {} arrays, found {count}",
            arch.layers.len() * 2
        )));
    }
    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut fan_in = arch.input;
    for (i, spec) in arch.layers.iter().enumerate() {
        let w = read_array(&mut r, &format!("layer{i}.weight"), &[fan_in, spec.width])?;
        let b = read_array(&mut r, &format!("layer{i}.bias"), &[spec.width])?;
        layers.push(Dense {
            weight: Array2::from_shape_vec((fan_in, spec.width), w).expect("checked dims"),
            bias: Array1::from(b),
            activation: spec.activation,
        });
        fan_in = spec.width;
    }
    if r.pos != body.len() {
        return Err(NnError::Format("trailing bytes after arrays".into()));
    }
    Ok((Mlp::from_layers(arch.input, layers)?, meta))
}

fn read_array(r: &mut Reader<'_>, name: &str, dims: &[usize]) -> Result<Vec<f64>> {
    let len = r.u32()? as usize;
    let got = std::str::from_utf8(r.take(len)?)
        .map_err(|_| NnError::Format("array name is not UTF-8".into()))?;
    if got != name {
        return Err(NnError::Format(format!(
            "expected array `{name}`, found `{got}`"
        )));
    }
    let ndim = r.u32()? as usize;
    let mut found = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        found.push(r.u64()? as usize);
    }
    if found != dims {
        return Err(NnError::Format(format!(
            "array `{name}` has dims {found:?}, expected {dims:?}"
        )));
    }
    let n: usize = dims.iter().product();
    let raw = r.take(n * 8)?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save_model(model: &Mlp, path: impl AsRef<Path>, metadata: &Metadata) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(model, metadata)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(Mlp, Metadata)> {
    decode(&fs::read(path)?)
}
