use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_TEST_RATIO: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::format("manifest", format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
}

/// Image/mask pairs labelled train or test, plus the seed and ratio that produced the labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<Entry>,
    pub seed: u64,
    pub ratio: f64,
}

/// Number of items that go to the training side: `ceil((1 - ratio) * n)`.
pub fn train_count(n: usize, ratio: f64) -> usize {
    let exact = (1.0 - ratio) * n as f64;
    // 0.9 * 100 must not become 91 through representation error.
    let snapped = exact.round();
    if (exact - snapped).abs() < 1e-9 {
        snapped as usize
    } else {
        exact.ceil() as usize
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("ratio {ratio} must lie in (0, 1)")))
    }
}

fn check_unique<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
    }
    Ok(())
}

/// Seeded shuffle; the first `train_count` positions are train, the rest test.
/// Returns one label per input id, in input order.
pub fn split_labels(ids: &[&str], ratio: f64, seed: u64) -> Result<Vec<Split>> {
    check_ratio(ratio)?;
    check_unique(ids.iter().copied())?;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = train_count(ids.len(), ratio);
    let mut labels = vec![Split::Test; ids.len()];
    for &i in &order[..n_train] {
        labels[i] = Split::Train;
    }
    Ok(labels)
}

/// Assigns a split to each `(id, image_path, mask_path)` item. Entry order follows the input.
pub fn split(
    items: impl IntoIterator<Item = (String, PathBuf, PathBuf)>,
    ratio: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    let items: Vec<_> = items.into_iter().collect();
    let ids: Vec<&str> = items.iter().map(|(id, _, _)| id.as_str()).collect();
    let labels = split_labels(&ids, ratio, seed)?;
    let entries = items
        .into_iter()
        .zip(labels)
        .map(|((id, image_path, mask_path), split)| Entry {
            id,
            image_path,
            mask_path,
            split,
        })
        .collect();
    Ok(DatasetManifest {
        entries,
        seed,
        ratio,
    })
}

impl DatasetManifest {
    pub fn of_split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.of_split(split).count()
    }

    /// Re-splits the same pairs with a new ratio and seed.
    pub fn resplit(&self, ratio: f64, seed: u64) -> Result<DatasetManifest> {
        split(
            self.entries
                .iter()
                .map(|e| (e.id.clone(), e.image_path.clone(), e.mask_path.clone())),
            ratio,
            seed,
        )
    }

    /// Header `#seed=<s>\tratio=<r>`, then `id  image_path  mask_path  split` rows.
    pub fn to_text(&self) -> String {
        let mut out = format!("#seed={}\tratio={}\n", self.seed, self.ratio);
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                e.id,
                e.image_path.display(),
                e.mask_path.display(),
                e.split
            );
        }
        out
    }

    /// Paths stay as written; see [`DatasetManifest::load`] for resolution.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|h| h.strip_prefix('#'))
            .ok_or_else(|| Error::format("manifest", "missing `#seed=…\tratio=…` header"))?;
        let (mut seed, mut ratio) = (None, None);
        for field in header.split('\t') {
            match field.split_once('=') {
                Some(("seed", v)) => seed = v.trim().parse().ok(),
                Some(("ratio", v)) => ratio = v.trim().parse().ok(),
                _ => {}
            }
        }
        let (Some(seed), Some(ratio)) = (seed, ratio) else {
            return Err(Error::format("manifest", format!("bad header `#{header}`")));
        };

        let mut entries = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, image, mask, split] = fields[..] else {
                return Err(Error::format(
                    "manifest",
                    format!("line {}: expected 4 tab-separated fields", n + 2),
                ));
            };
            if [id, image, mask].iter().any(|f| f.is_empty()) {
                return Err(Error::format("manifest", format!("line {}: empty field", n + 2)));
            }
            entries.push(Entry {
                id: id.to_string(),
                image_path: image.into(),
                mask_path: mask.into(),
                split: split.parse()?,
            });
        }
        check_unique(entries.iter().map(|e| e.id.as_str()))?;
        Ok(DatasetManifest {
            entries,
            seed,
            ratio,
        })
    }

    /// Reads a manifest file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for e in &mut manifest.entries {
            if e.image_path.is_relative() {
                e.image_path = base.join(&e.image_path);
            }
            if e.mask_path.is_relative() {
                e.mask_path = base.join(&e.mask_path);
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn items(n: usize) -> Vec<(String, PathBuf, PathBuf)> {
        (0..n)
            .map(|i| {
                (
                    format!("img{i:03}"),
                    format!("images/{i}.png").into(),
                    format!("masks/{i}.png").into(),
                )
            })
            .collect()
    }

    #[test]
    fn train_counts() {
        assert_eq!(train_count(100, 0.1), 90);
        assert_eq!(train_count(10, 0.1), 9);
        assert_eq!(train_count(11, 0.1), 10);
        assert_eq!(train_count(1, 0.1), 1);
        for n in (10..=1000).step_by(10) {
            assert_eq!(train_count(n, 0.1), n * 9 / 10, "n = {n}");
        }
    }

    #[test]
    fn split_examples() {
        let m = split(items(100), 0.1, 3).unwrap();
        assert_eq!((m.count(Split::Train), m.count(Split::Test)), (90, 10));
        let m = split(items(10), 0.1, 3).unwrap();
        assert_eq!((m.count(Split::Train), m.count(Split::Test)), (9, 1));
        assert_eq!(split(items(50), 0.1, 9).unwrap(), split(items(50), 0.1, 9).unwrap());
        assert_ne!(split(items(50), 0.1, 9).unwrap(), split(items(50), 0.1, 10).unwrap());
    }

    #[test]
    fn split_errors() {
        let mut dup = items(3);
        dup[2].0 = dup[0].0.clone();
        assert!(matches!(split(dup, 0.1, 0), Err(Error::DuplicateId(id)) if id == "img000"));
        for r in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(matches!(split(items(4), r, 0), Err(Error::InvalidParam(_))));
        }
    }

    #[test]
    fn text_round_trip() {
        let m = split(items(12), 0.25, 41).unwrap();
        let text = m.to_text();
        assert!(text.starts_with("#seed=41\tratio=0.25\n"));
        assert_eq!(DatasetManifest::parse(&text).unwrap(), m);
        assert!(DatasetManifest::parse("a\tb\tc\ttrain\n").is_err());
        assert!(DatasetManifest::parse("#seed=1\tratio=0.1\na\tb\tc\n").is_err());
        assert!(DatasetManifest::parse("#seed=1\tratio=0.1\na\tb\tc\tvalidation\n").is_err());
        assert!(matches!(
            DatasetManifest::parse("#seed=1\tratio=0.1\na\tb\tc\ttrain\na\td\te\ttest\n"),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        let mut m = split(items(3), 0.5, 0).unwrap();
        m.entries[0].image_path = "/abs/a.png".into();
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.entries[0].image_path, PathBuf::from("/abs/a.png"));
        assert_eq!(back.entries[1].image_path, dir.path().join("images/1.png"));
        assert!(matches!(
            DatasetManifest::load(&dir.path().join("missing.tsv")),
            Err(Error::Io { .. })
        ));
    }
}
