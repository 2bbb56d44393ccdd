//! Rating-log parsing, the filtering protocol, overlap computation, cold-start
//! splits, and per-user task assembly.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One (user, item, rating, timestamp) record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub rating: u8,
    pub timestamp: i64,
}

#[derive(Debug, Clone)]
pub struct DomainDataset {
    pub domain: Domain,
    pub interactions: Vec<Interaction>,
}

impl DomainDataset {
    pub fn new(domain: Domain, interactions: Vec<Interaction>) -> Self {
        DomainDataset {
            domain,
            interactions,
        }
    }

    pub fn user_ids(&self) -> BTreeSet<&str> {
        self.interactions.iter().map(|i| i.user_id.as_str()).collect()
    }

    pub fn item_ids(&self) -> BTreeSet<&str> {
        self.interactions.iter().map(|i| i.item_id.as_str()).collect()
    }
}

/// A user's support set (source domain) and query set (target domain).
#[derive(Debug, Clone)]
pub struct Task {
    pub user_id: String,
    pub support: Vec<Interaction>,
    pub query: Vec<Interaction>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitConfig {
    pub alpha: f64,
    pub support_length: usize,
    pub seed: u64,
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0,1), got {}",
                self.alpha
            )));
        }
        if self.support_length == 0 {
            return Err(Error::Config("support length must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            alpha: 0.2,
            support_length: 20,
            seed: 0,
        }
    }
}

// ── parsing ─────────────────────────────────────────────────────────

/// Parse `user_id,item_id,rating,timestamp` lines. Line numbers are 1-based
/// in diagnostics.
pub fn parse_ratings<R: BufRead>(reader: R, delimiter: char) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(delimiter).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let rating: i64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("invalid rating {:?}", fields[2]),
        })?;
        if !(1..=5).contains(&rating) {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("rating {rating} outside [1,5]"),
            });
        }
        let timestamp: i64 = fields[3].trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("invalid timestamp {:?}", fields[3]),
        })?;
        if timestamp < 0 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("negative timestamp {timestamp}"),
            });
        }
        out.push(Interaction {
            user_id: fields[0].to_string(),
            item_id: fields[1].to_string(),
            rating: rating as u8,
            timestamp,
        });
    }
    Ok(out)
}

pub fn parse_ratings_file(path: &Path) -> Result<Vec<Interaction>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ratings(std::io::BufReader::new(file), ',')
}

// ── filtering ───────────────────────────────────────────────────────

fn fixpoint_filter(interactions: Vec<Interaction>, min_interactions: usize) -> Vec<Interaction> {
    let mut current = interactions;
    loop {
        let mut user_counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut item_counts: BTreeMap<&str, usize> = BTreeMap::new();
        for i in &current {
            *user_counts.entry(i.user_id.as_str()).or_default() += 1;
            *item_counts.entry(i.item_id.as_str()).or_default() += 1;
        }
        let keep: Vec<bool> = current
            .iter()
            .map(|i| {
                user_counts[i.user_id.as_str()] >= min_interactions
                    && item_counts[i.item_id.as_str()] >= min_interactions
            })
            .collect();
        if keep.iter().all(|&k| k) {
            return current;
        }
        current = current
            .into_iter()
            .zip(keep)
            .filter_map(|(i, k)| k.then_some(i))
            .collect();
    }
}

/// Drop users/items with fewer than `min_interactions` interactions in their
/// domain (iterated to fixpoint), then drop source-domain interactions rated
/// below `source_rating_floor` (applied once, after the fixpoint).
pub fn filter_pair(
    source: DomainDataset,
    target: DomainDataset,
    min_interactions: usize,
    source_rating_floor: u8,
) -> Result<(DomainDataset, DomainDataset)> {
    let src = fixpoint_filter(source.interactions, min_interactions);
    let tgt = fixpoint_filter(target.interactions, min_interactions);
    let src: Vec<Interaction> = src
        .into_iter()
        .filter(|i| i.rating >= source_rating_floor)
        .collect();
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::Protocol(
            "filtering left an empty domain; dataset too sparse".into(),
        ));
    }
    Ok((
        DomainDataset::new(Domain::Source, src),
        DomainDataset::new(Domain::Target, tgt),
    ))
}

// ── overlap and split ───────────────────────────────────────────────

/// Users present in both domains, and users only in the source domain.
pub fn compute_overlap(
    source: &DomainDataset,
    target: &DomainDataset,
) -> Result<(Vec<String>, Vec<String>)> {
    let su = source.user_ids();
    let tu = target.user_ids();
    let overlap: Vec<String> = su
        .iter()
        .filter(|u| tu.contains(**u))
        .map(|u| u.to_string())
        .collect();
    let source_only: Vec<String> = su
        .iter()
        .filter(|u| !tu.contains(**u))
        .map(|u| u.to_string())
        .collect();
    if overlap.is_empty() {
        return Err(Error::Protocol(
            "no overlapping users between domains; training impossible".into(),
        ));
    }
    Ok((overlap, source_only))
}

/// Deterministic seeded split of the overlap into (training, testing) users;
/// ceil(alpha * n) users go to the cold-start test partition.
pub fn split_users(overlap: &[String], config: &SplitConfig) -> Result<(Vec<String>, Vec<String>)> {
    config.validate()?;
    let mut shuffled: Vec<String> = overlap.to_vec();
    shuffled.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffled.shuffle(&mut rng);
    let n_test = (config.alpha * shuffled.len() as f64).ceil() as usize;
    if n_test == 0 || n_test >= shuffled.len() {
        return Err(Error::Protocol(format!(
            "alpha {} yields an empty train or test partition over {} users",
            config.alpha,
            shuffled.len()
        )));
    }
    let test = shuffled[..n_test].to_vec();
    let train = shuffled[n_test..].to_vec();
    Ok((train, test))
}

// ── tasks ───────────────────────────────────────────────────────────

/// Support = the user's source interactions sorted by timestamp (ties broken
/// by item id), truncated to the most recent `support_length`; query = all the
/// user's target interactions.
pub fn build_task(
    user_id: &str,
    source: &DomainDataset,
    target: &DomainDataset,
    support_length: usize,
) -> Result<Task> {
    let mut support: Vec<Interaction> = source
        .interactions
        .iter()
        .filter(|i| i.user_id == user_id)
        .cloned()
        .collect();
    if support.is_empty() {
        return Err(Error::Task(format!(
            "user {user_id} has no source-domain interactions"
        )));
    }
    support.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| a.item_id.cmp(&b.item_id))
    });
    if support.len() > support_length {
        support = support.split_off(support.len() - support_length);
    }
    let mut query: Vec<Interaction> = target
        .interactions
        .iter()
        .filter(|i| i.user_id == user_id)
        .cloned()
        .collect();
    query.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| a.item_id.cmp(&b.item_id))
    });
    Ok(Task {
        user_id: user_id.to_string(),
        support,
        query,
    })
}

// ── preprocessed directory ──────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitFile {
    pub alpha: f64,
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub source: DomainDataset,
    pub target: DomainDataset,
    pub overlap: Vec<String>,
    pub split: SplitFile,
}

fn write_ratings(path: &Path, interactions: &[Interaction]) -> Result<()> {
    let mut out = String::new();
    for i in interactions {
        out.push_str(&format!(
            "{},{},{},{}\n",
            i.user_id, i.item_id, i.rating, i.timestamp
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_preprocessed(dir: &Path, data: &Preprocessed) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_ratings(&dir.join("source.csv"), &data.source.interactions)?;
    write_ratings(&dir.join("target.csv"), &data.target.interactions)?;
    let overlap_txt: String = data
        .overlap
        .iter()
        .map(|u| format!("{u}\n"))
        .collect();
    let overlap_path = dir.join("overlap.txt");
    std::fs::write(&overlap_path, overlap_txt).map_err(|e| Error::io(&overlap_path, e))?;
    let split_path = dir.join("split.json");
    let json = serde_json::to_string_pretty(&data.split)?;
    std::fs::write(&split_path, json).map_err(|e| Error::io(&split_path, e))?;
    Ok(())
}

pub fn read_preprocessed(dir: &Path) -> Result<Preprocessed> {
    let source = DomainDataset::new(Domain::Source, parse_ratings_file(&dir.join("source.csv"))?);
    let target = DomainDataset::new(Domain::Target, parse_ratings_file(&dir.join("target.csv"))?);
    let overlap_path = dir.join("overlap.txt");
    let overlap_txt =
        std::fs::read_to_string(&overlap_path).map_err(|e| Error::io(&overlap_path, e))?;
    let overlap: Vec<String> = overlap_txt.lines().map(|l| l.to_string()).collect();
    let split_path = dir.join("split.json");
    let split_txt =
        std::fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
    let split: SplitFile = serde_json::from_str(&split_txt)?;
    Ok(Preprocessed {
        source,
        target,
        overlap,
        split,
    })
}

/// Full preprocessing pipeline over two parsed domains.
pub fn preprocess(
    source: DomainDataset,
    target: DomainDataset,
    config: &SplitConfig,
) -> Result<Preprocessed> {
    let (source, target) = filter_pair(source, target, 5, 4)?;
    let (overlap, _source_only) = compute_overlap(&source, &target)?;
    let (train, test) = split_users(&overlap, config)?;
    Ok(Preprocessed {
        source,
        target,
        overlap,
        split: SplitFile {
            alpha: config.alpha,
            seed: config.seed,
            train,
            test,
        },
    })
}
