use std::io::{BufRead, Write};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClassId, DatasetIndex};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_RETRIES: usize = 50;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeMode {
    /// Query contains at least one of the episode classes.
    #[default]
    Any,
    /// Query contains every episode class.
    All,
}

/// One N-way K-shot task. Images are referenced by index position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<ClassId>,
    /// `support[n][k]`: k-th shot of the n-th episode class.
    pub support: Vec<Vec<usize>>,
    pub query: usize,
    pub mode: EpisodeMode,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn k_shot(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    pub fn to_record(&self, index: &DatasetIndex) -> ManifestRecord {
        let name = |i: usize| index.entries[i].name.clone();
        ManifestRecord {
            classes: self.classes.clone(),
            support: self
                .support
                .iter()
                .map(|shots| shots.iter().map(|&i| name(i)).collect())
                .collect(),
            query: name(self.query),
            mode: self.mode,
        }
    }

    pub fn from_record(rec: &ManifestRecord, index: &DatasetIndex) -> Result<Episode> {
        let pos = |n: &str| {
            index
                .position(n)
                .ok_or_else(|| Error::Data(format!("manifest references unknown image {n:?}")))
        };
        Ok(Episode {
            classes: rec.classes.clone(),
            support: rec
                .support
                .iter()
                .map(|shots| shots.iter().map(|n| pos(n)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?,
            query: pos(&rec.query)?,
            mode: rec.mode,
        })
    }
}

/// Line-delimited replay record of an episode, referencing images by name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub classes: Vec<ClassId>,
    pub support: Vec<Vec<String>>,
    pub query: String,
    pub mode: EpisodeMode,
}

pub fn write_manifest<W: Write>(mut w: W, records: &[ManifestRecord]) -> Result<()> {
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("serializable"))?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

fn choose<R: Rng + ?Sized>(rng: &mut R, items: &[usize]) -> usize {
    items[rng.random_range(0..items.len())]
}

/// Draws one episode from the classes of `split`.
///
/// Classes are drawn without replacement, then a query is drawn among the
/// images satisfying `mode`, then K support images per class, none equal to
/// the query. Unsatisfiable draws are retried up to `max_retries` times.
#[allow(clippy::too_many_arguments)]
pub fn sample_episode<R: Rng + ?Sized>(
    index: &DatasetIndex,
    split: &[ClassId],
    n_way: usize,
    k_shot: usize,
    mode: EpisodeMode,
    max_retries: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Episode(format!("invalid {n_way}-way {k_shot}-shot request")));
    }
    let usable: Vec<ClassId> = split
        .iter()
        .copied()
        .filter(|&c| !index.images_with(c).is_empty())
        .collect();
    if usable.len() < n_way {
        return Err(Error::Episode(format!(
            "split has {} classes with images, need {n_way}",
            usable.len()
        )));
    }

    for _ in 0..max_retries.max(1) {
        let classes: Vec<ClassId> = sample_indices(rng, usable.len(), n_way)
            .into_iter()
            .map(|i| usable[i])
            .collect();

        let candidates: Vec<usize> = match mode {
            EpisodeMode::All => {
                let mut c = index.images_with(classes[0]).to_vec();
                for cls in &classes[1..] {
                    let other = index.images_with(*cls);
                    c.retain(|i| other.binary_search(i).is_ok());
                }
                c
            }
            EpisodeMode::Any => {
                let mut c: Vec<usize> = classes
                    .iter()
                    .flat_map(|&cls| index.images_with(cls).iter().copied())
                    .collect();
                c.sort_unstable();
                c.dedup();
                c
            }
        };
        if candidates.is_empty() {
            continue;
        }
        let query = choose(rng, &candidates);

        let mut support = Vec::with_capacity(n_way);
        for &cls in &classes {
            let pool: Vec<usize> = index
                .images_with(cls)
                .iter()
                .copied()
                .filter(|&i| i != query)
                .collect();
            if pool.len() < k_shot {
                break;
            }
            support.push(
                sample_indices(rng, pool.len(), k_shot)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect::<Vec<_>>(),
            );
        }
        if support.len() < n_way {
            continue;
        }
        return Ok(Episode {
            classes,
            support,
            query,
            mode,
        });
    }
    Err(Error::Episode(format!(
        "no {n_way}-way {k_shot}-shot episode in mode {mode:?} after {max_retries} attempts"
    )))
}
