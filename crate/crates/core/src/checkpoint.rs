//! Checkpoint directories: one binary blob per network plus `manifest.json`
//! with shapes, architecture fingerprints, the config echo and the seed.
//!
//! Blob layout (little endian): magic `CSGN`, `u32` version, `u32` entry
//! count, then per entry `u32` name length, UTF-8 name, `u32` rank, `u64`
//! dims, `f64` values.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nets::{build_extractor, init_networks, init_segmenter, NetKind, Network, NetworkBundle, Param};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CSGN";
const BLOB_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "casgan-checkpoint";

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Digest of a network's layer list and parameter layout.
pub fn fingerprint(net: &Network) -> String {
    let mut h = Sha256::new();
    h.update(net.kind().name().as_bytes());
    for l in net.layers() {
        h.update(b"\n");
        h.update(l.as_bytes());
    }
    for p in net.params() {
        h.update(format!("\n{}:{:?}", p.name, p.value.shape()).as_bytes());
    }
    hex(&h.finalize())
}

pub fn encode_blob(entries: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("blob truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_blob(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a parameter blob (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != BLOB_VERSION {
        return Err(Error::Checkpoint(format!("unsupported blob version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = c.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if c.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after blob".into()));
    }
    Ok(out)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub name: String,
    pub file: String,
    pub fingerprint: String,
    pub sha256: String,
    pub num_scalars: usize,
    pub frozen: bool,
    pub layers: Vec<String>,
    pub params: Vec<ParamShape>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    /// Stride-2 layers of every patch discriminator.
    pub stride2_layers: usize,
    /// Side of the score map at the configured image size.
    pub score_extent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub step: u64,
    pub epoch: u64,
    pub config: RunConfig,
    pub patch_discriminator: Option<PatchGeometry>,
    pub networks: Vec<NetworkEntry>,
}

impl Manifest {
    fn new(config: &RunConfig, seed: u64, step: u64, epoch: u64) -> Self {
        Self {
            format: FORMAT.into(),
            version: 1,
            seed,
            step,
            epoch,
            config: config.clone(),
            patch_discriminator: None,
            networks: Vec::new(),
        }
    }

    pub fn entry(&self, name: &str) -> Option<&NetworkEntry> {
        self.networks.iter().find(|n| n.name == name)
    }
}

fn write_network(dir: &Path, net: &Network, frozen: bool) -> Result<NetworkEntry> {
    let entries: Vec<(&str, &Tensor)> = net.params().iter().map(|p| (p.name.as_str(), &p.value)).collect();
    let blob = encode_blob(&entries);
    let file = format!("{}.bin", net.kind().name());
    write_bytes(&dir.join(&file), &blob)?;
    Ok(NetworkEntry {
        name: net.kind().name().into(),
        file,
        fingerprint: fingerprint(net),
        sha256: sha256_hex(&blob),
        num_scalars: net.num_scalars(),
        frozen,
        layers: net.layers().to_vec(),
        params: net
            .params()
            .iter()
            .map(|p| ParamShape {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    })
}

/// Loads `entry` into `template`, which supplies the expected layout.
fn read_network(dir: &Path, entry: &NetworkEntry, template: &mut Network) -> Result<()> {
    if entry.fingerprint != fingerprint(template) {
        return Err(Error::Checkpoint(format!(
            "{}: architecture fingerprint does not match the config",
            entry.name
        )));
    }
    let blob = read_bytes(&dir.join(&entry.file))?;
    if sha256_hex(&blob) != entry.sha256 {
        return Err(Error::Checkpoint(format!("{}: blob digest mismatch", entry.name)));
    }
    let params = decode_blob(&blob)?
        .into_iter()
        .map(|(name, value)| Param { name, value })
        .collect();
    template.load_params(params)
}

fn save_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(m)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::Checkpoint(format!("no {MANIFEST} in {}", dir.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.format != FORMAT {
        return Err(Error::Checkpoint(format!("{} is not a {FORMAT}", path.display())));
    }
    m.config.validate()?;
    Ok(m)
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Saves every network of the bundle (the segmenter only if present).
pub fn save_bundle(dir: &Path, bundle: &NetworkBundle, step: u64, epoch: u64) -> Result<Manifest> {
    mkdir(dir)?;
    let mut m = Manifest::new(&bundle.config, bundle.seed, step, epoch);
    let (k, extent) = bundle.patch_geometry();
    m.patch_discriminator = Some(PatchGeometry {
        stride2_layers: k,
        score_extent: extent,
    });
    for kind in NetKind::GENERATORS.iter().chain(NetKind::DISCRIMINATORS.iter()) {
        let net = bundle.net(*kind).expect("trainable network present");
        m.networks.push(write_network(dir, net, false)?);
    }
    if let Some(seg) = &bundle.segmenter {
        m.networks.push(write_network(dir, seg, true)?);
    }
    save_manifest(dir, &m)?;
    Ok(m)
}

/// Loads a bundle, validating every parameter shape against the layout the
/// echoed config implies.
pub fn load_bundle(dir: &Path) -> Result<(NetworkBundle, Manifest)> {
    let m = read_manifest(dir)?;
    let mut bundle = init_networks(&m.config, m.seed)?;
    for kind in NetKind::GENERATORS.iter().chain(NetKind::DISCRIMINATORS.iter()) {
        let entry = m
            .entry(kind.name())
            .ok_or_else(|| Error::Checkpoint(format!("manifest lacks network {}", kind.name())))?;
        read_network(dir, entry, bundle.net_mut(*kind).expect("trainable network"))?;
    }
    if let Some(entry) = m.entry(NetKind::Segmenter.name()) {
        let mut seg = init_segmenter(&m.config, 0);
        read_network(dir, entry, &mut seg)?;
        bundle.segmenter = Some(seg);
    }
    Ok((bundle, m))
}

/// Standalone checkpoint of auxiliary networks (segmenter, extractor).
pub fn save_networks(dir: &Path, config: &RunConfig, seed: u64, nets: &[&Network]) -> Result<Manifest> {
    mkdir(dir)?;
    let mut m = Manifest::new(config, seed, 0, 0);
    for net in nets {
        m.networks.push(write_network(dir, net, net.kind() == NetKind::Segmenter)?);
    }
    save_manifest(dir, &m)?;
    Ok(m)
}

/// Loads one auxiliary network of `kind` from a checkpoint directory. The
/// layout comes from the checkpoint's own config.
pub fn load_network(dir: &Path, kind: NetKind) -> Result<Option<(Network, RunConfig)>> {
    let m = read_manifest(dir)?;
    let Some(entry) = m.entry(kind.name()) else {
        return Ok(None);
    };
    let mut net = match kind {
        NetKind::Segmenter => init_segmenter(&m.config, 0),
        NetKind::Extractor => build_extractor(&m.config, 0),
        other => crate::nets::build_network(other, &m.config, 0),
    };
    read_network(dir, entry, &mut net)?;
    Ok(Some((net, m.config)))
}

/// Named tensors stored beside a checkpoint (optimizer moments, buffers).
pub fn save_tensors(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let refs: Vec<(&str, &Tensor)> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_bytes(path, &encode_blob(&refs))
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_blob(&read_bytes(path)?)
}

/// `dir/step_000123`-style sub-directory names.
pub fn step_dir(root: &Path, step: u64) -> PathBuf {
    root.join(format!("step_{step:07}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RunConfig {
        RunConfig {
            image_size: 16,
            latent_channels: 8,
            gen_base_width: 4,
            n_res_blocks: 2,
            disc_base_width: 4,
            disc_layers: 2,
            seg_depth: 2,
            seg_base_width: 4,
            ..RunConfig::default()
        }
    }

    #[test]
    fn blob_round_trip() {
        let a = Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE, 0.0, 7.0]).unwrap();
        let b = Tensor::zeros(&[0]);
        let blob = encode_blob(&[("a", &a), ("b", &b)]);
        let back = decode_blob(&blob).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("b".to_string(), b)]);
        assert!(decode_blob(&blob[..blob.len() - 1]).is_err());
        assert!(decode_blob(b"nope").is_err());
    }

    #[test]
    fn bundle_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut bundle = init_networks(&cfg(), 3).unwrap();
        bundle.install_segmenter(init_segmenter(&cfg(), 9)).unwrap();
        let m = save_bundle(dir.path(), &bundle, 5, 1).unwrap();
        assert_eq!(m.networks.len(), 10);
        assert_eq!(m.patch_discriminator.unwrap().score_extent, 2);
        let (back, m2) = load_bundle(dir.path()).unwrap();
        assert_eq!(back, bundle);
        assert_eq!((m2.step, m2.epoch, m2.seed), (5, 1, 3));

        // tampering with a blob is caught
        let f = dir.path().join("g_bg.bin");
        let mut bytes = read_bytes(&f).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        write_bytes(&f, &bytes).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn fingerprint_tracks_architecture() {
        let a = init_networks(&cfg(), 0).unwrap();
        let b = init_networks(&cfg(), 1).unwrap();
        assert_eq!(fingerprint(&a.e_bg), fingerprint(&b.e_bg));
        let wider = RunConfig {
            gen_base_width: 8,
            ..cfg()
        };
        let c = init_networks(&wider, 0).unwrap();
        assert_ne!(fingerprint(&a.e_bg), fingerprint(&c.e_bg));
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Checkpoint(_))));
    }
}
