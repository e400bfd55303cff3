//! Dataset manifests: a comma-separated `image,label,split` listing with
//! paths relative to the manifest file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::LabeledSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Dataset(format!("unknown split `{s}` (expected train, val or test)"))),
        }
    }
}

/// Train/val/test sizes for `n` volumes at the 88:22:20 ratio, rounded by
/// largest remainder (ties go to the earlier split).
pub fn split_counts(n: usize) -> [usize; 3] {
    const RATIO: [usize; 3] = [88, 22, 20];
    let total: usize = RATIO.iter().sum();
    let mut counts = RATIO.map(|r| n * r / total);
    let mut order = [0, 1, 2];
    order.sort_by_key(|&i| std::cmp::Reverse(n * RATIO[i] % total));
    let left = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
}

const HEADER: &str = "image,label,split";

impl Manifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>, origin: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (entries.is_empty() && line == HEADER) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [image, label, split] = fields[..] else {
                return Err(Error::Dataset(format!("{origin} line {}: expected `{HEADER}`, got `{line}`", n + 1)));
            };
            let split = split.parse().map_err(|e| Error::Dataset(format!("{origin} line {}: {e}", n + 1)))?;
            entries.push(ManifestEntry { image: image.into(), label: label.into(), split });
        }
        Ok(Manifest { entries, root: root.into() })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Manifest::parse(&text, root, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{}\n", e.image.display(), e.label.display(), e.split));
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.root.join(p) }
    }

    /// Loads every pair in `split`, naming the manifest line of any missing file.
    pub fn load(&self, split: Split) -> Result<Vec<(String, LabeledSample)>> {
        let mut out = Vec::new();
        for (n, e) in self.entries.iter().enumerate() {
            if e.split != split {
                continue;
            }
            let (img, lab) = (self.resolve(&e.image), self.resolve(&e.label));
            for (what, p) in [("image", &img), ("label", &lab)] {
                if !p.is_file() {
                    return Err(Error::Dataset(format!("manifest entry {}: {what} file {} not found", n + 1, p.display())));
                }
            }
            out.push((e.image.display().to_string(), LabeledSample::load(&img, &lab)?));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_counts() {
        assert_eq!(split_counts(130), [88, 22, 20]);
        assert_eq!(split_counts(0), [0, 0, 0]);
        assert_eq!(split_counts(13), [9, 2, 2]);
        assert_eq!(split_counts(16), [11, 3, 2]);
        for n in 0..300 {
            assert_eq!(split_counts(n).iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn text_round_trip_and_errors() {
        let m = Manifest {
            entries: vec![
                ManifestEntry { image: "a.nii.gz".into(), label: "a_seg.nii.gz".into(), split: Split::Train },
                ManifestEntry { image: "b.nii.gz".into(), label: "b_seg.nii.gz".into(), split: Split::Test },
            ],
            root: PathBuf::new(),
        };
        assert_eq!(Manifest::parse(&m.to_text(), "", "m").unwrap(), m);
        assert_eq!(m.split(Split::Test).count(), 1);
        assert!(Manifest::parse("a,b,holdout\n", "", "m").is_err());
        let err = Manifest::parse("image,label,split\nx,y\n", "", "m.csv").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn missing_label_names_the_entry() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.nii"), b"").unwrap();
        let m = Manifest::parse("a.nii,missing.nii,train\n", dir.path(), "m").unwrap();
        let err = m.load(Split::Train).unwrap_err().to_string();
        assert!(err.contains("entry 1") && err.contains("missing.nii"), "{err}");
    }
}
