//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"CDCK"                     magic
//! u32                         format version
//! u32 + bytes                 architecture descriptor (JSON)
//! u32 + bytes                 training config echo (JSON)
//! u64                         parameter count
//! f32 × count                 parameters, network by network, w0 b0 w1 b1 ...
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseLayer, Network};
use crate::tensor::Tensor;
use crate::vae::VaeModel;

pub const MAGIC: &[u8; 4] = b"CDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetDescriptor {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub dropout: f32,
}

impl NetDescriptor {
    pub fn of(net: &Network) -> Self {
        Self {
            widths: net.widths(),
            activations: net.layers.iter().map(|l| l.activation).collect(),
            dropout: net.dropout_rate,
        }
    }

    fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vae,
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub kind: ModelKind,
    pub networks: Vec<NetDescriptor>,
}

impl ArchDescriptor {
    pub fn of_vae(vae: &VaeModel) -> Self {
        Self {
            kind: ModelKind::Vae,
            networks: vec![NetDescriptor::of(&vae.encoder), NetDescriptor::of(&vae.decoder)],
        }
    }

    pub fn of_classifier(clf: &ClassifierModel) -> Self {
        Self {
            kind: ModelKind::Classifier,
            networks: vec![NetDescriptor::of(&clf.net)],
        }
    }
}

pub struct Checkpoint {
    pub arch: ArchDescriptor,
    pub config: serde_json::Value,
    pub networks: Vec<Network>,
}

pub fn encode(arch: &ArchDescriptor, config: &serde_json::Value, nets: &[&Network]) -> Result<Vec<u8>> {
    if arch.networks.len() != nets.len() || arch.networks.iter().zip(nets).any(|(d, n)| *d != NetDescriptor::of(n)) {
        return Err(Error::Checkpoint("descriptor does not describe the networks".into()));
    }
    let arch_json = serde_json::to_vec(arch)?;
    let config_json = serde_json::to_vec(config)?;
    let count: usize = nets.iter().map(|n| n.num_params()).sum();
    let mut out = Vec::with_capacity(32 + arch_json.len() + config_json.len() + 4 * count);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arch_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch_json);
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&config_json);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for net in nets {
        for p in net.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let n = r.u32()? as usize;
    let arch: ArchDescriptor = serde_json::from_slice(r.take(n)?)?;
    let n = r.u32()? as usize;
    let config: serde_json::Value = serde_json::from_slice(r.take(n)?)?;
    let count = r.u64()? as usize;
    let expected: usize = arch.networks.iter().map(|d| d.num_params()).sum();
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "descriptor needs {expected} parameters, file declares {count}"
        )));
    }
    let mut networks = Vec::with_capacity(arch.networks.len());
    for d in &arch.networks {
        if d.widths.len() != d.activations.len() + 1 {
            return Err(Error::Checkpoint("descriptor widths and activations disagree".into()));
        }
        let mut layers = Vec::new();
        for (w, &act) in d.widths.windows(2).zip(&d.activations) {
            let (i, o) = (w[0], w[1]);
            let weights = read_f32s(&mut r, i * o)?;
            let bias = read_f32s(&mut r, o)?;
            layers.push(DenseLayer {
                weights: Tensor::new(vec![i, o], weights)?,
                bias: Tensor::new(vec![o], bias)?,
                activation: act,
            });
        }
        networks.push(Network::new(layers, d.dropout)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { arch, config, networks })
}

fn read_f32s(r: &mut Reader<'_>, n: usize) -> Result<Vec<f32>> {
    Ok(r
        .take(n * 4)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save(path: impl AsRef<Path>, arch: &ArchDescriptor, config: &serde_json::Value, nets: &[&Network]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(arch, config, nets)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_vae(path: impl AsRef<Path>, vae: &VaeModel, config: &serde_json::Value) -> Result<()> {
    save(path, &ArchDescriptor::of_vae(vae), config, &[&vae.encoder, &vae.decoder])
}

/// Load a VAE; when `expected` is given the stored descriptor must match it.
pub fn load_vae(path: impl AsRef<Path>, expected: Option<&ArchDescriptor>) -> Result<(VaeModel, serde_json::Value)> {
    let ck = load(path)?;
    check_arch(&ck.arch, ModelKind::Vae, expected)?;
    let mut nets = ck.networks.into_iter();
    let (enc, dec) = match (nets.next(), nets.next(), nets.next()) {
        (Some(e), Some(d), None) => (e, d),
        _ => return Err(Error::Checkpoint("a VAE checkpoint holds exactly two networks".into())),
    };
    Ok((VaeModel::from_networks(enc, dec)?, ck.config))
}

pub fn save_classifier(path: impl AsRef<Path>, clf: &ClassifierModel, config: &serde_json::Value) -> Result<()> {
    save(path, &ArchDescriptor::of_classifier(clf), config, &[&clf.net])
}

pub fn load_classifier(
    path: impl AsRef<Path>,
    expected: Option<&ArchDescriptor>,
) -> Result<(ClassifierModel, serde_json::Value)> {
    let ck = load(path)?;
    check_arch(&ck.arch, ModelKind::Classifier, expected)?;
    let net = ck
        .networks
        .into_iter()
        .next()
        .ok_or_else(|| Error::Checkpoint("classifier checkpoint holds no network".into()))?;
    Ok((ClassifierModel::from_network(net)?, ck.config))
}

fn check_arch(found: &ArchDescriptor, kind: ModelKind, expected: Option<&ArchDescriptor>) -> Result<()> {
    if found.kind != kind {
        return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", found.kind)));
    }
    if let Some(exp) = expected {
        if exp != found {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: expected {}, found {}",
                serde_json::to_string(exp).unwrap_or_default(),
                serde_json::to_string(found).unwrap_or_default()
            )));
        }
    }
    Ok(())
}
