use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataSplit, Interaction, InteractionDataset, NoiseReport, SplitManifest};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InteractionFormat {
    Tsv,
    Csv,
}

impl InteractionFormat {
    fn separator(self) -> char {
        match self {
            InteractionFormat::Tsv => '\t',
            InteractionFormat::Csv => ',',
        }
    }

    /// Guess from the file extension, defaulting to TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => InteractionFormat::Csv,
            _ => InteractionFormat::Tsv,
        }
    }
}

/// Bijection between raw tokens and dense indices, in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (pos, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), pos).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token `{tok}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Dense ids `0..n` whose tokens are their own decimal rendering.
    pub fn identity(n: usize) -> Self {
        Self::from_tokens((0..n).map(|i| i.to_string()).collect()).expect("distinct")
    }

    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Output of [`load_interactions`].
#[derive(Debug, Clone)]
pub struct LoadedInteractions {
    pub dataset: InteractionDataset,
    pub users: Vocabulary,
    pub items: Vocabulary,
    pub duplicates: usize,
}

fn is_header(fields: &[&str]) -> bool {
    fields.first().is_some_and(|f| f.eq_ignore_ascii_case("user"))
}

/// Reads `user,item[,timestamp]` rows and densely re-indexes both columns.
///
/// Blank lines and `#` comments are skipped, as is a leading `user,item`
/// header. Duplicate pairs are dropped and counted.
pub fn load_interactions(path: &Path, format: InteractionFormat) -> Result<LoadedInteractions> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let sep = format.separator();
    let mut users = Vocabulary::default();
    let mut items = Vocabulary::default();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut duplicates = 0;
    let mut first_data_line = true;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(sep).map(str::trim).collect();
        if first_data_line && is_header(&fields) {
            first_data_line = false;
            continue;
        }
        first_data_line = false;
        if fields.len() < 2 || fields.len() > 3 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected `user{sep}item[{sep}timestamp]`, got `{trimmed}`"),
            });
        }
        let u = users.intern(fields[0]);
        let i = items.intern(fields[1]);
        if seen.insert((u, i)) {
            pairs.push((u, i));
        } else {
            duplicates += 1;
        }
    }
    if pairs.is_empty() {
        return Err(Error::Empty(format!("no interactions in {}", path.display())));
    }
    if duplicates > 0 {
        log::info!("{}: dropped {duplicates} duplicate interactions", path.display());
    }
    let dataset = InteractionDataset::from_pairs(users.len(), items.len(), pairs)?;
    Ok(LoadedInteractions {
        dataset,
        users,
        items,
        duplicates,
    })
}

/// Writes dense `user\titem` rows, optionally translating through vocabularies.
pub fn write_interactions(
    path: &Path,
    ds: &InteractionDataset,
    vocab: Option<(&Vocabulary, &Vocabulary)>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for it in ds.interactions() {
        let res = match vocab {
            Some((users, items)) => writeln!(w, "{}\t{}", users.token(it.user), items.token(it.item)),
            None => writeln!(w, "{}\t{}", it.user, it.item),
        };
        res.map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    #[serde(flatten)]
    manifest: SplitManifest,
    user_tokens: Vec<String>,
    item_tokens: Vec<String>,
}

/// A split persisted on disk with its vocabularies and optional noise record.
#[derive(Debug, Clone)]
pub struct SplitDir {
    pub split: DataSplit,
    pub manifest: SplitManifest,
    pub users: Vocabulary,
    pub items: Vocabulary,
    pub noise: Option<NoiseReport>,
}

fn part_path(dir: &Path, part: &str) -> PathBuf {
    dir.join(format!("{part}.tsv"))
}

/// Writes `train.tsv`, `valid.tsv`, `test.tsv` (dense ids), `manifest.json`
/// and, when present, `noise.json`.
pub fn write_split_dir(
    dir: &Path,
    split: &DataSplit,
    seed: u64,
    users: &Vocabulary,
    items: &Vocabulary,
    noise: Option<&NoiseReport>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_interactions(&part_path(dir, "train"), &split.train, None)?;
    write_interactions(&part_path(dir, "valid"), &split.valid, None)?;
    write_interactions(&part_path(dir, "test"), &split.test, None)?;
    let manifest = ManifestFile {
        manifest: split.manifest(seed),
        user_tokens: users.tokens().to_vec(),
        item_tokens: items.tokens().to_vec(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    if let Some(report) = noise {
        let path = dir.join("noise.json");
        fs::write(&path, serde_json::to_vec_pretty(report)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn read_dense(path: &Path, n_users: usize, n_items: usize, flagged: &std::collections::HashSet<(usize, usize)>) -> Result<InteractionDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let mut fields = line.split('\t');
        let mut next = || -> Result<usize> {
            fields
                .next()
                .ok_or_else(|| parse_err("missing column".into()))?
                .trim()
                .parse::<usize>()
                .map_err(|e| parse_err(e.to_string()))
        };
        let (user, item) = (next()?, next()?);
        out.push(Interaction {
            user,
            item,
            label: 1,
            injected: flagged.contains(&(user, item)),
        });
    }
    InteractionDataset::new(n_users, n_items, out)
}

/// Inverse of [`write_split_dir`].
pub fn read_split_dir(dir: &Path) -> Result<SplitDir> {
    let path = dir.join("manifest.json");
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let file: ManifestFile = serde_json::from_slice(&raw)?;
    let noise_path = dir.join("noise.json");
    let noise: Option<NoiseReport> = if noise_path.exists() {
        let raw = fs::read(&noise_path).map_err(|e| Error::io(&noise_path, e))?;
        Some(serde_json::from_slice(&raw)?)
    } else {
        None
    };
    let flagged: std::collections::HashSet<(usize, usize)> = noise
        .iter()
        .flat_map(|n| n.injected_pairs.iter().copied())
        .collect();
    let m = &file.manifest;
    let none = Default::default();
    let split = DataSplit {
        train: read_dense(&part_path(dir, "train"), m.n_users, m.n_items, &flagged)?,
        valid: read_dense(&part_path(dir, "valid"), m.n_users, m.n_items, &none)?,
        test: read_dense(&part_path(dir, "test"), m.n_users, m.n_items, &none)?,
    };
    Ok(SplitDir {
        split,
        manifest: file.manifest,
        users: Vocabulary::from_tokens(file.user_tokens)?,
        items: Vocabulary::from_tokens(file.item_tokens)?,
        noise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{inject_noise, split_per_user, SplitRatios};

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn reindexes_in_first_appearance_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.tsv", "a\tx\na\ty\nb\tx\n");
        let loaded = load_interactions(&p, InteractionFormat::Tsv).unwrap();
        assert_eq!(loaded.dataset.n_users(), 2);
        assert_eq!(loaded.dataset.n_items(), 2);
        assert_eq!(loaded.dataset.len(), 3);
        assert_eq!(loaded.users.get("b"), Some(1));
        assert_eq!(loaded.items.token(1), "y");
    }

    #[test]
    fn drops_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "user,item\na,x,17\na,x,18\n");
        let loaded = load_interactions(&p, InteractionFormat::Csv).unwrap();
        assert_eq!(loaded.dataset.len(), 1);
        assert_eq!(loaded.duplicates, 1);
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.tsv", "a\tx\n\nbroken\n");
        match load_interactions(&p, InteractionFormat::Tsv).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn empty_file_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.tsv", "");
        assert!(matches!(
            load_interactions(&p, InteractionFormat::Tsv),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn split_dir_roundtrip_keeps_noise_flags() {
        let pairs = (0..10).flat_map(|u| (0..10).map(move |k| (u, (u + 3 * k) % 31)));
        let ds = InteractionDataset::from_pairs(10, 31, pairs).unwrap();
        let split = split_per_user(&ds, SplitRatios::default(), 4);
        let (noisy, report) = inject_noise(&split, 0.1, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let users = Vocabulary::identity(10);
        let items = Vocabulary::identity(31);
        write_split_dir(dir.path(), &noisy, 4, &users, &items, Some(&report)).unwrap();
        let back = read_split_dir(dir.path()).unwrap();
        assert_eq!(back.split.train.len(), noisy.train.len());
        assert_eq!(back.split.train.n_injected(), report.injected_pairs.len());
        assert_eq!(back.manifest.seed, 4);
        assert_eq!(back.noise.unwrap(), report);
        for it in noisy.train.interactions() {
            assert_eq!(back.split.train.is_injected(it.user, it.item), it.injected);
        }
    }
}
