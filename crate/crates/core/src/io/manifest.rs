//! Plain-text `key = value` dataset manifest and mask records.
//!
//! Keys appear in a fixed order and each sample is one `sample = …` line,
//! so two corpora generated from the same flags diff cleanly:
//!
//! ```text
//! version = 1
//! image_size = 64
//! n_angles = 90
//! n_bins = 95
//! missing_fraction = 0.3333
//! norm_scale = 17.0394
//! seed = 0
//! n_train = 512
//! n_eval = 32
//! sample = <id> <split> <seed> <gt file> <la file> <mask file> <phantom file>
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::{read_bytes, write_bytes};
use crate::grid::ProjectionGeometry;
use crate::masking::AngularMask;
use crate::{Error, Result};

const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::invalid(format!("unknown split {other:?} (expected train or eval)"))),
        }
    }
}

/// File names are relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub gt: String,
    pub la: String,
    pub mask: String,
    pub phantom: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub geometry: ProjectionGeometry,
    pub missing_fraction: f64,
    pub norm_scale: f64,
    pub seed: u64,
    pub samples: Vec<SampleRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn encode(&self) -> String {
        let g = &self.geometry;
        let mut out = String::new();
        let _ = writeln!(out, "version = {VERSION}");
        let _ = writeln!(out, "image_size = {}", g.image_size());
        let _ = writeln!(out, "n_angles = {}", g.n_angles());
        let _ = writeln!(out, "n_bins = {}", g.n_bins());
        let _ = writeln!(out, "missing_fraction = {}", self.missing_fraction);
        let _ = writeln!(out, "norm_scale = {}", self.norm_scale);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "n_train = {}", self.count(Split::Train));
        let _ = writeln!(out, "n_eval = {}", self.count(Split::Eval));
        for s in &self.samples {
            let _ = writeln!(
                out,
                "sample = {} {} {} {} {} {} {}",
                s.id,
                s.split.name(),
                s.seed,
                s.gt,
                s.la,
                s.mask,
                s.phantom
            );
        }
        out
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut fields = Vec::new();
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| bad(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "sample" {
                samples.push(parse_sample(value).map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?);
            } else {
                fields.push((key.to_string(), value.to_string()));
            }
        }
        let get = |k: &str| -> Result<&str> {
            fields
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| bad(format!("missing key {k}")))
        };
        let version: u32 = parse(get("version")?, "version")?;
        if version != VERSION {
            return Err(bad(format!("unsupported manifest version {version}")));
        }
        let geometry = ProjectionGeometry::new(
            parse(get("n_angles")?, "n_angles")?,
            parse(get("n_bins")?, "n_bins")?,
            parse(get("image_size")?, "image_size")?,
        )?;
        let manifest = Self {
            geometry,
            missing_fraction: parse(get("missing_fraction")?, "missing_fraction")?,
            norm_scale: parse(get("norm_scale")?, "norm_scale")?,
            seed: parse(get("seed")?, "seed")?,
            samples,
        };
        let n_train: usize = parse(get("n_train")?, "n_train")?;
        let n_eval: usize = parse(get("n_eval")?, "n_eval")?;
        if manifest.count(Split::Train) != n_train || manifest.count(Split::Eval) != n_eval {
            return Err(bad(format!(
                "header declares {n_train} train / {n_eval} eval samples, found {} / {}",
                manifest.count(Split::Train),
                manifest.count(Split::Eval)
            )));
        }
        let mut seeds = HashSet::new();
        let mut ids = HashSet::new();
        for s in &manifest.samples {
            if !seeds.insert(s.seed) {
                return Err(bad(format!("duplicate sample seed {}", s.seed)));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(bad(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(manifest)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_bytes(&dir.join(MANIFEST_FILE), self.encode().as_bytes())
    }

    /// Reads `dir/manifest.txt` and checks that every referenced file exists.
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = String::from_utf8(read_bytes(&path)?).map_err(|_| bad("manifest is not UTF-8"))?;
        let m = Self::decode(&text)?;
        for s in &m.samples {
            for f in [&s.gt, &s.la, &s.mask, &s.phantom] {
                if !dir.join(f).is_file() {
                    return Err(bad(format!("sample {} references missing file {f}", s.id)));
                }
            }
        }
        Ok(m)
    }
}

fn parse_sample(value: &str) -> Result<SampleRecord> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    let [id, split, seed, gt, la, mask, phantom] = parts[..] else {
        return Err(Error::invalid(format!("sample line needs 7 fields, got {}", parts.len())));
    };
    Ok(SampleRecord {
        id: id.to_string(),
        split: split.parse()?,
        seed: parse(seed, "seed")?,
        gt: gt.to_string(),
        la: la.to_string(),
        mask: mask.to_string(),
        phantom: phantom.to_string(),
    })
}

fn parse<T: FromStr>(v: &str, what: &str) -> Result<T> {
    v.parse().map_err(|_| bad(format!("cannot parse {what} from {v:?}")))
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("manifest", reason)
}

/// Three-line `key = value` record of an [`AngularMask`].
pub fn write_mask(path: &Path, m: &AngularMask) -> Result<()> {
    let text = format!(
        "n_angles = {}\nmissing_start = {}\nmissing_len = {}\n",
        m.n_angles(),
        m.missing_start(),
        m.missing_len()
    );
    write_bytes(path, text.as_bytes())
}

pub fn read_mask(path: &Path) -> Result<AngularMask> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|_| Error::format("mask", "not UTF-8"))?;
    let mut vals = [None; 3];
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("mask", format!("{}: bad line {line:?}", path.display())))?;
        let idx = match k.trim() {
            "n_angles" => 0,
            "missing_start" => 1,
            "missing_len" => 2,
            other => return Err(Error::format("mask", format!("unknown key {other}"))),
        };
        vals[idx] = Some(v.trim().parse::<usize>().map_err(|_| Error::format("mask", format!("bad value {v:?}")))?);
    }
    match vals {
        [Some(n), Some(s), Some(l)] => AngularMask::new(n, s, l),
        _ => Err(Error::format("mask", format!("{}: incomplete record", path.display()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> DatasetManifest {
        let rec = |i: u64, split| SampleRecord {
            id: format!("s{i}"),
            split,
            seed: i,
            gt: format!("s{i}.gt.sino"),
            la: format!("s{i}.la.sino"),
            mask: format!("s{i}.mask"),
            phantom: format!("s{i}.phantom.sino"),
        };
        DatasetManifest {
            geometry: ProjectionGeometry::desk_default(),
            missing_fraction: 0.3333,
            norm_scale: 17.039_412_345,
            seed: 4,
            samples: vec![rec(0, Split::Train), rec(1, Split::Train), rec(2, Split::Eval)],
        }
    }

    #[test]
    fn text_round_trip() {
        let m = manifest();
        let text = m.encode();
        assert!(text.starts_with("version = 1\nimage_size = 64\n"));
        assert_eq!(DatasetManifest::decode(&text).unwrap(), m);
    }

    #[test]
    fn rejects_inconsistent_manifests() {
        let text = manifest().encode();
        assert!(DatasetManifest::decode(&text.replace("n_train = 2", "n_train = 3")).is_err());
        assert!(DatasetManifest::decode(&text.replace("s1 train 1", "s1 train 0")).is_err());
        assert!(DatasetManifest::decode(&text.replace("version = 1", "version = 2")).is_err());
        assert!(DatasetManifest::decode(&text.replace("n_bins = 95\n", "")).is_err());
        let dir = tempfile::tempdir().unwrap();
        manifest().write(dir.path()).unwrap();
        assert!(DatasetManifest::read(dir.path()).is_err(), "referenced files are missing");
    }

    #[test]
    fn mask_record_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mask");
        let m = AngularMask::new(90, 81, 30).unwrap();
        write_mask(&path, &m).unwrap();
        assert_eq!(read_mask(&path).unwrap(), m);
        std::fs::write(&path, "n_angles = 90\nmissing_start = 3\n").unwrap();
        assert!(read_mask(&path).is_err());
    }
}
