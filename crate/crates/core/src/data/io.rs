use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;

use serde::{Deserialize, Serialize};

use super::{generate_scene, SceneSample, SceneSpec};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SCNE";
const HEADER: usize = 4 + 2 + 2 + 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

pub fn sample_file_name(index: u64) -> String {
    format!("scene_{index:06}.bin")
}

/// Layout: `"SCNE"`, u16 H, u16 W, u8 K (little-endian), then planar RGB
/// (3·H·W), SAR (H·W) and labels (H·W).
pub fn write_sample(path: &Path, s: &SceneSample) -> Result<()> {
    let p = s.pixels();
    if s.rgb.len() != 3 * p || s.sar.len() != p || s.label.len() != p {
        return Err(Error::format(path, "raster sizes disagree with H×W"));
    }
    let (h, w) = (u16::try_from(s.height), u16::try_from(s.width));
    let (Ok(h), Ok(w), Ok(k)) = (h, w, u8::try_from(s.num_classes)) else {
        return Err(Error::format(path, "dimensions exceed the header fields"));
    };
    let mut buf = Vec::with_capacity(HEADER + 5 * p);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&h.to_le_bytes());
    buf.extend_from_slice(&w.to_le_bytes());
    buf.push(k);
    buf.extend_from_slice(&s.rgb);
    buf.extend_from_slice(&s.sar);
    buf.extend_from_slice(&s.label);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_sample(path: &Path) -> Result<SceneSample> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < HEADER || &buf[..4] != MAGIC {
        return Err(Error::format(path, "missing SCNE header"));
    }
    let h = u16::from_le_bytes([buf[4], buf[5]]) as usize;
    let w = u16::from_le_bytes([buf[6], buf[7]]) as usize;
    let k = buf[8] as usize;
    let p = h * w;
    if buf.len() != HEADER + 5 * p {
        return Err(Error::format(
            path,
            format!("expected {} bytes for {h}×{w}, found {}", HEADER + 5 * p, buf.len()),
        ));
    }
    let body = &buf[HEADER..];
    let label = body[4 * p..].to_vec();
    if let Some(i) = label.iter().position(|&l| l as usize >= k) {
        return Err(Error::Data {
            msg: format!("{}: label {} outside [0, {k})", path.display(), label[i]),
            row: i / w.max(1),
            col: i % w.max(1),
        });
    }
    Ok(SceneSample {
        height: h,
        width: w,
        num_classes: k,
        rgb: body[..3 * p].to_vec(),
        sar: body[3 * p..4 * p].to_vec(),
        label,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    /// Even indices train, odd indices validate.
    pub fn of(index: u64) -> Split {
        if index % 2 == 0 {
            Split::Train
        } else {
            Split::Val
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train or val)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub count: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub spec: SceneSpec,
}

impl Manifest {
    pub fn new(spec: &SceneSpec, n: u64) -> Self {
        let names = |split| (0..n).filter(|&i| Split::of(i) == split).map(sample_file_name).collect();
        Manifest {
            format: "SCNE".into(),
            count: n,
            train: names(Split::Train),
            val: names(Split::Val),
            spec: spec.clone(),
        }
    }

    pub fn files(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        m.spec.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn write_all(spec: &SceneSpec, n: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(n.max(1) as usize) as u64;
    thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || -> Result<()> {
                    for i in (w..n).step_by(workers as usize) {
                        write_sample(&dir.join(sample_file_name(i)), &generate_scene(spec, i))?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .try_for_each(|h| h.join().expect("generator thread panicked"))
    })
}

/// Writes `n` scenes and the manifest into `dir`.
pub fn make_dataset(spec: &SceneSpec, n: u64, dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    if n % 2 != 0 {
        return Err(Error::Config(format!("dataset size must be even for the 1:1 split, got {n}")));
    }
    write_all(spec, n, dir)?;
    let manifest = Manifest::new(spec, n);
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Rebuilds the dataset described by an existing manifest into `dir`.
pub fn regenerate(manifest_path: &Path, dir: &Path) -> Result<Manifest> {
    let m = Manifest::load(manifest_path)?;
    make_dataset(&m.spec, m.count, dir)
}

/// A dataset directory with its manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest: Manifest::load(&dir.join(MANIFEST_FILE))?,
        })
    }

    pub fn load(&self, split: Split) -> Result<Vec<SceneSample>> {
        let k = self.manifest.spec.num_classes();
        self.manifest
            .files(split)
            .iter()
            .map(|f| {
                let path = self.dir.join(f);
                let s = read_sample(&path)?;
                if s.num_classes != k {
                    return Err(Error::format(&path, format!("{} classes, manifest says {k}", s.num_classes)));
                }
                Ok(s)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_roundtrip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let s = SceneSample {
            height: 2,
            width: 3,
            num_classes: 4,
            rgb: (0..18).collect(),
            sar: vec![9; 6],
            label: vec![0, 1, 2, 3, 0, 1],
        };
        let path = dir.path().join("x.bin");
        write_sample(&path, &s).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..9], b"SCNE\x02\x00\x03\x00\x04");
        assert_eq!(bytes.len(), 9 + 30);
        assert_eq!(read_sample(&path).unwrap(), s);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, b"SCNX\x01\x00\x01\x00\x02abcde").unwrap();
        assert!(matches!(read_sample(&path), Err(Error::Format { .. })));
        fs::write(&path, b"SCNE\x01\x00\x02\x00\x02abcdefgh\x00\x05").unwrap();
        assert!(matches!(read_sample(&path), Err(Error::Data { row: 0, col: 1, .. })));
        assert!(matches!(read_sample(&dir.path().join("none.bin")), Err(Error::Io { .. })));
    }

    #[test]
    fn split_is_interleaved() {
        let m = Manifest::new(&SceneSpec::default(), 10);
        assert_eq!(m.train.len(), 5);
        assert_eq!(m.val.len(), 5);
        let m = Manifest::new(&SceneSpec::default(), 2);
        assert_eq!(m.train, ["scene_000000.bin"]);
        assert_eq!(m.val, ["scene_000001.bin"]);
    }

    #[test]
    fn dataset_roundtrip_and_regeneration() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            size: 16,
            cloud_coverage: 0.3,
            seed: 5,
            ..SceneSpec::default()
        };
        make_dataset(&spec, 6, a.path()).unwrap();
        regenerate(&a.path().join(MANIFEST_FILE), b.path()).unwrap();
        for i in 0..6 {
            let name = sample_file_name(i);
            assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
        }
        let ds = Dataset::open(a.path()).unwrap();
        let val = ds.load(Split::Val).unwrap();
        assert_eq!(val.len(), 3);
        assert_eq!(val[0], generate_scene(&spec, 1));
        assert!(make_dataset(&spec, 5, a.path()).is_err());
    }

    #[test]
    fn unwritable_directory() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        fs::write(&file, b"x").unwrap();
        let spec = SceneSpec { size: 16, ..SceneSpec::default() };
        assert!(matches!(make_dataset(&spec, 2, &file.join("sub")), Err(Error::Io { .. })));
    }
}
