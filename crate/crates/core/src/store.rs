//! On-disk sample store: `images/{id}.pgm` (8-bit P5) plus one JSON line per
//! sample in `samples.jsonl`.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervention::{FlipRecord, Intervention};

pub const METADATA_FILE: &str = "samples.jsonl";
pub const IMAGE_DIR: &str = "images";
pub const IMAGE_SIDE: usize = 28;

/// Metadata line of one generated sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    #[serde(flatten)]
    pub intervention: Intervention,
    pub z: Vec<f32>,
    #[serde(default, with = "nonfinite_map")]
    pub metrics: BTreeMap<String, f64>,
    #[serde(flatten)]
    pub flips: FlipRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample {
    pub record: SampleRecord,
    /// Row-major 8-bit pixels.
    pub image: Vec<u8>,
}

impl GeneratedSample {
    pub fn pixels(&self) -> Vec<f32> {
        self.image.iter().map(|&b| b as f32 / 255.0).collect()
    }
}

/// JSON numbers cannot hold infinities, so non-finite metric values are
/// written as the strings `"inf"`, `"-inf"` and `"nan"`.
mod nonfinite_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Wire {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
        let wire: BTreeMap<&String, Wire> = map
            .iter()
            .map(|(k, &v)| {
                let w = if v.is_finite() {
                    Wire::Num(v)
                } else if v.is_nan() {
                    Wire::Text("nan".into())
                } else if v > 0.0 {
                    Wire::Text("inf".into())
                } else {
                    Wire::Text("-inf".into())
                };
                (k, w)
            })
            .collect();
        wire.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
        let wire = BTreeMap::<String, Wire>::deserialize(d)?;
        wire.into_iter()
            .map(|(k, w)| {
                let v = match w {
                    Wire::Num(v) => v,
                    Wire::Text(t) => match t.as_str() {
                        "inf" => f64::INFINITY,
                        "-inf" => f64::NEG_INFINITY,
                        "nan" => f64::NAN,
                        other => return Err(serde::de::Error::custom(format!("bad metric value {other:?}"))),
                    },
                };
                Ok((k, v))
            })
            .collect()
    }
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parse a binary 8-bit PGM; returns `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Store(format!("invalid PGM: {m}"));
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?.to_string());
    }
    if fields[0] != "P5" {
        return Err(bad("not a P5 file"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad dimension"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    pos += 1;
    let data = bytes.get(pos..).ok_or_else(|| bad("missing pixel data"))?;
    if data.len() != w * h {
        return Err(bad(&format!("expected {} pixels, found {}", w * h, data.len())));
    }
    Ok((w, h, data.to_vec()))
}

pub struct SampleStore {
    dir: PathBuf,
}

impl SampleStore {
    /// Open (creating if needed) a store rooted at `dir`.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let images = dir.join(IMAGE_DIR);
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn image_path(&self, id: &str) -> PathBuf {
        self.dir.join(IMAGE_DIR).join(format!("{id}.pgm"))
    }

    fn metadata_path(&self) -> PathBuf {
        self.dir.join(METADATA_FILE)
    }

    fn existing_ids(&self) -> Result<HashSet<String>> {
        Ok(self.load_records()?.into_iter().map(|r| r.id).collect())
    }

    /// Append samples. Ids must be new and unique.
    pub fn save(&self, samples: &[GeneratedSample]) -> Result<()> {
        let mut seen = self.existing_ids()?;
        for s in samples {
            validate_id(&s.record.id)?;
            if !seen.insert(s.record.id.clone()) {
                return Err(Error::Store(format!("sample id {} already exists", s.record.id)));
            }
            if s.image.len() != IMAGE_SIDE * IMAGE_SIDE {
                return Err(Error::Store(format!("sample {} has {} pixels", s.record.id, s.image.len())));
            }
        }
        for s in samples {
            let p = self.image_path(&s.record.id);
            fs::write(&p, encode_pgm(IMAGE_SIDE, IMAGE_SIDE, &s.image)).map_err(|e| Error::io(&p, e))?;
        }
        let meta = self.metadata_path();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&meta)
            .map_err(|e| Error::io(&meta, e))?;
        let mut buf = String::new();
        for s in samples {
            buf.push_str(&serde_json::to_string(&s.record)?);
            buf.push('\n');
        }
        f.write_all(buf.as_bytes()).map_err(|e| Error::io(&meta, e))?;
        f.sync_all().map_err(|e| Error::io(&meta, e))
    }

    pub fn load_records(&self) -> Result<Vec<SampleRecord>> {
        let meta = self.metadata_path();
        let f = match File::open(&meta) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&meta, e)),
        };
        let mut out = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&meta, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Store(format!("{}:{}: {e}", meta.display(), n + 1)))?;
            out.push(rec);
        }
        Ok(out)
    }

    pub fn load_image(&self, id: &str) -> Result<Vec<u8>> {
        let p = self.image_path(id);
        let bytes = fs::read(&p).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Store(format!("image for sample {id} is missing ({})", p.display())),
            _ => Error::io(&p, e),
        })?;
        let (w, h, px) = decode_pgm(&bytes)?;
        if (w, h) != (IMAGE_SIDE, IMAGE_SIDE) {
            return Err(Error::Store(format!("sample {id} image is {w}x{h}")));
        }
        Ok(px)
    }

    pub fn load(&self) -> Result<Vec<GeneratedSample>> {
        self.load_records()?
            .into_iter()
            .map(|record| {
                let image = self.load_image(&record.id)?;
                Ok(GeneratedSample { record, image })
            })
            .collect()
    }

    /// Replace the metadata file with `records` (e.g. after adding metrics).
    pub fn rewrite_records(&self, records: &[SampleRecord]) -> Result<()> {
        let meta = self.metadata_path();
        let tmp = self.dir.join(format!("{METADATA_FILE}.tmp"));
        let mut buf = String::new();
        for r in records {
            buf.push_str(&serde_json::to_string(r)?);
            buf.push('\n');
        }
        let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(buf.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &meta).map_err(|e| Error::io(&meta, e))
    }
}

fn validate_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.') || id.starts_with('.') {
        return Err(Error::Store(format!("invalid sample id {id:?}")));
    }
    Ok(())
}
