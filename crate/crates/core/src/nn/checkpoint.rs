//! Text manifest plus a little-endian f64 blob.
//!
//! ```text
//! tmr-checkpoint v1
//! step 500
//! mode tmr
//! config_hash <sha256 of the config lines>
//! blob step_000500.bin
//! dtype f64le
//! config key=value
//! vocab <id>\t<token>
//! meta key value
//! tensor <name> <d0,d1,..> <offset> <nbytes>
//! ```

use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "tmr-checkpoint v1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub step: u64,
    pub mode: String,
    pub config: Vec<(String, String)>,
    pub vocab: Vec<String>,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

/// Result of a filtered load: which tensors were actually read from the blob.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadTrace {
    pub read: Vec<String>,
    pub skipped: Vec<String>,
}

pub fn config_hash(config: &[(String, String)]) -> String {
    let mut h = Sha256::new();
    for (k, v) in config {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take_tensor(&mut self, name: &str) -> Option<Tensor> {
        let i = self.tensors.iter().position(|(n, _)| n == name)?;
        Some(self.tensors.remove(i).1)
    }

    /// Write `<manifest>` and its blob next to it (same stem, `.bin`).
    pub fn save(&self, manifest: &Path) -> Result<()> {
        let blob_path = manifest.with_extension("bin");
        let blob_name = blob_path
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| bad(manifest, "manifest path has no file name"))?
            .to_string();
        if let Some(dir) = manifest.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let mut text = String::new();
        text.push_str(MAGIC);
        text.push('\n');
        text.push_str(&format!("step {}\nmode {}\n", self.step, self.mode));
        text.push_str(&format!("config_hash {}\n", config_hash(&self.config)));
        text.push_str(&format!("blob {blob_name}\ndtype f64le\n"));
        for (k, v) in &self.config {
            text.push_str(&format!("config {k}={v}\n"));
        }
        for (i, tok) in self.vocab.iter().enumerate() {
            text.push_str(&format!("vocab {i}\t{tok}\n"));
        }
        for (k, v) in &self.meta {
            text.push_str(&format!("meta {k} {v}\n"));
        }
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(bad(manifest, format!("tensor name {name:?} contains whitespace")));
            }
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let offset = blob.len();
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            text.push_str(&format!("tensor {name} {} {offset} {}\n", dims.join(","), blob.len() - offset));
        }
        let mut f = File::create(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        f.write_all(&blob).map_err(|e| Error::io(&blob_path, e))?;
        fs::write(manifest, text).map_err(|e| Error::io(manifest, e))
    }

    pub fn load(manifest: &Path) -> Result<Self> {
        Ok(Self::load_filtered(manifest, |_| true)?.0)
    }

    /// Load only tensors accepted by `keep`; the others are never read.
    pub fn load_filtered(manifest: &Path, keep: impl Fn(&str) -> bool) -> Result<(Self, LoadTrace)> {
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad(manifest, "missing header"));
        }
        let mut ck = Checkpoint::default();
        let mut hash = None;
        let mut blob = None;
        let mut specs = Vec::new();
        for line in lines {
            let (kind, rest) = line.split_once(' ').ok_or_else(|| bad(manifest, format!("malformed line {line:?}")))?;
            match kind {
                "step" => ck.step = rest.parse().map_err(|_| bad(manifest, "bad step"))?,
                "mode" => ck.mode = rest.to_string(),
                "config_hash" => hash = Some(rest.to_string()),
                "blob" => blob = Some(rest.to_string()),
                "dtype" if rest == "f64le" => {}
                "dtype" => return Err(bad(manifest, format!("unsupported dtype {rest}"))),
                "config" => {
                    let (k, v) = rest.split_once('=').ok_or_else(|| bad(manifest, "bad config line"))?;
                    ck.config.push((k.to_string(), v.to_string()));
                }
                "vocab" => {
                    let (i, tok) = rest.split_once('\t').ok_or_else(|| bad(manifest, "bad vocab line"))?;
                    if i.parse::<usize>().ok() != Some(ck.vocab.len()) {
                        return Err(bad(manifest, "vocab ids out of order"));
                    }
                    ck.vocab.push(tok.to_string());
                }
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ck.meta.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 4 {
                        return Err(bad(manifest, format!("bad tensor line {line:?}")));
                    }
                    let dims = if f[1].is_empty() {
                        Vec::new()
                    } else {
                        f[1].split(',').map(str::parse).collect::<std::result::Result<Vec<usize>, _>>().map_err(|_| bad(manifest, "bad dims"))?
                    };
                    let off: u64 = f[2].parse().map_err(|_| bad(manifest, "bad offset"))?;
                    let nbytes: usize = f[3].parse().map_err(|_| bad(manifest, "bad size"))?;
                    if nbytes != dims.iter().product::<usize>() * 8 {
                        return Err(bad(manifest, format!("size of {} disagrees with its dims", f[0])));
                    }
                    specs.push((f[0].to_string(), dims, off, nbytes));
                }
                other => return Err(bad(manifest, format!("unknown line kind {other}"))),
            }
        }
        match hash {
            Some(h) if h == config_hash(&ck.config) => {}
            Some(_) => return Err(bad(manifest, "config hash mismatch")),
            None => return Err(bad(manifest, "missing config_hash")),
        }
        let blob = blob.ok_or_else(|| bad(manifest, "missing blob line"))?;
        let blob_path: PathBuf = manifest.parent().unwrap_or(Path::new(".")).join(blob);
        let mut f = File::open(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let mut trace = LoadTrace::default();
        for (name, dims, off, nbytes) in specs {
            if !keep(&name) {
                trace.skipped.push(name);
                continue;
            }
            let mut buf = vec![0u8; nbytes];
            f.seek(SeekFrom::Start(off)).map_err(|e| Error::io(&blob_path, e))?;
            f.read_exact(&mut buf).map_err(|e| Error::io(&blob_path, e))?;
            let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            ck.tensors.push((name.clone(), Tensor::from_vec(&dims, data)?));
            trace.read.push(name);
        }
        Ok((ck, trace))
    }
}
