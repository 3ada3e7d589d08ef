//! Interaction data: delimiter-separated ingestion with id remapping,
//! k-core filtering, per-user splits, a binary cache format, and planted
//! synthetic generation with known ground-truth factors.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub weight: f64,
    pub split: Split,
}

/// Dense-indexed user-item interactions with split tags and the original
/// id maps.
#[derive(Debug, Clone)]
pub struct InteractionSet {
    pub interactions: Vec<Interaction>,
    pub n_users: usize,
    pub n_items: usize,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// duplicate (user, item) rows overwritten during loading
    pub duplicate_warnings: usize,
    /// users too small to receive valid/test items during splitting
    pub small_user_warnings: usize,
}

impl InteractionSet {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn of_split(&self, split: Split) -> impl Iterator<Item = &Interaction> {
        self.interactions.iter().filter(move |t| t.split == split)
    }

    /// Items per user in the given split.
    pub fn items_by_user(&self, split: Split) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_users];
        for t in self.of_split(split) {
            out[t.user].push(t.item);
        }
        out
    }
}

fn detect_delimiter(line: &str) -> char {
    if line.contains('\t') {
        '\t'
    } else {
        ','
    }
}

/// Load (user, item, rating[, timestamp]) rows, keep ratings >= threshold,
/// remap raw ids to dense indices in first-seen order. Duplicate
/// (user, item) pairs follow last-wins with a warning count.
pub fn load_tsv(path: &Path, threshold: f64) -> Result<InteractionSet> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut item_index: HashMap<String, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    let mut interactions: Vec<Interaction> = Vec::new();
    let mut duplicate_warnings = 0;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let delim = detect_delimiter(&line);
        let fields: Vec<&str> = line.split(delim).collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected at least 3 fields, got {}", fields.len()),
            });
        }
        let rating: f64 = fields[2].trim().parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad rating {:?}", fields[2]),
        })?;
        if rating < threshold {
            continue;
        }
        let user = *user_index
            .entry(fields[0].trim().to_string())
            .or_insert_with(|| {
                user_ids.push(fields[0].trim().to_string());
                user_ids.len() - 1
            });
        let item = *item_index
            .entry(fields[1].trim().to_string())
            .or_insert_with(|| {
                item_ids.push(fields[1].trim().to_string());
                item_ids.len() - 1
            });
        match seen.get(&(user, item)) {
            Some(&pos) => {
                interactions[pos].weight = rating;
                duplicate_warnings += 1;
            }
            None => {
                seen.insert((user, item), interactions.len());
                interactions.push(Interaction {
                    user,
                    item,
                    weight: rating,
                    split: Split::Train,
                });
            }
        }
    }
    if interactions.is_empty() {
        return Err(Error::domain("no interactions above threshold"));
    }
    Ok(InteractionSet {
        interactions,
        n_users: user_ids.len(),
        n_items: item_ids.len(),
        user_ids,
        item_ids,
        duplicate_warnings,
        small_user_warnings: 0,
    })
}

fn reindex(data: InteractionSet) -> InteractionSet {
    // compact indices after removals, preserving first-seen order
    let mut user_map: HashMap<usize, usize> = HashMap::new();
    let mut item_map: HashMap<usize, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut interactions = Vec::with_capacity(data.interactions.len());
    for t in &data.interactions {
        let user = *user_map.entry(t.user).or_insert_with(|| {
            user_ids.push(data.user_ids[t.user].clone());
            user_ids.len() - 1
        });
        let item = *item_map.entry(t.item).or_insert_with(|| {
            item_ids.push(data.item_ids[t.item].clone());
            item_ids.len() - 1
        });
        interactions.push(Interaction {
            user,
            item,
            weight: t.weight,
            split: t.split,
        });
    }
    InteractionSet {
        interactions,
        n_users: user_ids.len(),
        n_items: item_ids.len(),
        user_ids,
        item_ids,
        duplicate_warnings: data.duplicate_warnings,
        small_user_warnings: data.small_user_warnings,
    }
}

/// Iteratively drop users and items with fewer than k interactions until
/// nothing changes, then compact indices.
pub fn k_core_filter(mut data: InteractionSet, k: usize) -> Result<InteractionSet> {
    if k < 1 {
        return Err(Error::domain("k must be >= 1"));
    }
    loop {
        let mut user_count = vec![0usize; data.n_users];
        let mut item_count = vec![0usize; data.n_items];
        for t in &data.interactions {
            user_count[t.user] += 1;
            item_count[t.item] += 1;
        }
        let before = data.interactions.len();
        data.interactions
            .retain(|t| user_count[t.user] >= k && item_count[t.item] >= k);
        if data.interactions.is_empty() {
            return Err(Error::domain("k-core filtering removed everything"));
        }
        if data.interactions.len() == before {
            return Ok(reindex(data));
        }
    }
}

/// Per-user 0.8/0.1/0.1 split after a seeded shuffle. Valid and test each
/// take one item first, the remainder goes to train; users with fewer than
/// 3 interactions stay train-only with a warning count.
pub fn split_per_user(mut data: InteractionSet, ratios: [f64; 3], seed: u64) -> Result<InteractionSet> {
    if ratios.iter().any(|&r| r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("split ratios must be nonnegative and sum to 1"));
    }
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); data.n_users];
    for (pos, t) in data.interactions.iter().enumerate() {
        by_user[t.user].push(pos);
    }
    let mut small_user_warnings = 0;
    for (user, positions) in by_user.into_iter().enumerate() {
        let n = positions.len();
        let mut order = positions;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(user as u64);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        if n < 3 {
            small_user_warnings += 1;
            continue;
        }
        let n_valid = ((n as f64 * ratios[1]).floor() as usize).max(1);
        let n_test = ((n as f64 * ratios[2]).floor() as usize).max(1);
        for (rank, &pos) in order.iter().enumerate() {
            data.interactions[pos].split = if rank < n_valid {
                Split::Valid
            } else if rank < n_valid + n_test {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    data.small_user_warnings = small_user_warnings;
    Ok(data)
}

/// Synthetic interactions sampled from softmax(temperature * u . V^T)
/// without replacement, with the generating factors returned as ground
/// truth.
pub fn synth_planted(
    n_users: usize,
    n_items: usize,
    d: usize,
    temperature: f64,
    interactions_per_user: usize,
    seed: u64,
) -> Result<(InteractionSet, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if n_users == 0 || n_items == 0 || d == 0 || interactions_per_user == 0 {
        return Err(Error::domain("all sizes must be positive"));
    }
    if temperature < 0.0 {
        return Err(Error::domain("temperature must be nonnegative"));
    }
    if interactions_per_user >= n_items {
        return Err(Error::domain("interactions_per_user must be < n_items"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussian = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let user_factors: Vec<Vec<f64>> = (0..n_users)
        .map(|_| (0..d).map(|_| gaussian(&mut rng)).collect())
        .collect();
    let item_factors: Vec<Vec<f64>> = (0..n_items)
        .map(|_| (0..d).map(|_| gaussian(&mut rng)).collect())
        .collect();
    let mut interactions = Vec::with_capacity(n_users * interactions_per_user);
    for (user, u) in user_factors.iter().enumerate() {
        let mut weights: Vec<f64> = item_factors
            .iter()
            .map(|v| {
                let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
                (temperature * dot).exp()
            })
            .collect();
        for _ in 0..interactions_per_user {
            let total: f64 = weights.iter().sum();
            let mut target = rng.gen_range(0.0..1.0) * total;
            let mut picked = n_items - 1;
            for (j, &w) in weights.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                target -= w;
                if target <= 0.0 {
                    picked = j;
                    break;
                }
            }
            weights[picked] = 0.0; // without replacement
            interactions.push(Interaction {
                user,
                item: picked,
                weight: 1.0,
                split: Split::Train,
            });
        }
    }
    let set = InteractionSet {
        interactions,
        n_users,
        n_items,
        user_ids: (0..n_users).map(|i| i.to_string()).collect(),
        item_ids: (0..n_items).map(|i| i.to_string()).collect(),
        duplicate_warnings: 0,
        small_user_warnings: 0,
    };
    Ok((set, user_factors, item_factors))
}

const CACHE_MAGIC: &[u8; 8] = b"FYBCACHE";

/// Binary cache: magic, u32 counts, then (u32 user, u32 item, u8 split,
/// f64 weight little-endian) per interaction, followed by the id maps as
/// length-prefixed UTF-8.
pub fn save_cache(data: &InteractionSet, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(data.n_users as u32).to_le_bytes());
    out.extend_from_slice(&(data.n_items as u32).to_le_bytes());
    out.extend_from_slice(&(data.interactions.len() as u32).to_le_bytes());
    for t in &data.interactions {
        out.extend_from_slice(&(t.user as u32).to_le_bytes());
        out.extend_from_slice(&(t.item as u32).to_le_bytes());
        out.push(match t.split {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        });
        out.extend_from_slice(&t.weight.to_le_bytes());
    }
    for ids in [&data.user_ids, &data.item_ids] {
        for id in ids.iter() {
            let bytes = id.as_bytes();
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(bytes);
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<InteractionSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::config("truncated cache file"));
        }
        let out = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(out)
    };
    if take(&mut pos, 8)? != CACHE_MAGIC {
        return Err(Error::config("bad cache magic"));
    }
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    let n_users = read_u32(&mut pos)? as usize;
    let n_items = read_u32(&mut pos)? as usize;
    let n = read_u32(&mut pos)? as usize;
    let mut interactions = Vec::with_capacity(n);
    for _ in 0..n {
        let user = read_u32(&mut pos)? as usize;
        let item = read_u32(&mut pos)? as usize;
        let split = match take(&mut pos, 1)?[0] {
            0 => Split::Train,
            1 => Split::Valid,
            2 => Split::Test,
            other => return Err(Error::config(format!("bad split tag {other}"))),
        };
        let weight = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        interactions.push(Interaction {
            user,
            item,
            weight,
            split,
        });
    }
    let read_ids = |count: usize, pos: &mut usize| -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(pos)? as usize;
            let raw = take(pos, len)?;
            out.push(
                String::from_utf8(raw.to_vec())
                    .map_err(|_| Error::config("non-UTF-8 id in cache"))?,
            );
        }
        Ok(out)
    };
    let user_ids = read_ids(n_users, &mut pos)?;
    let item_ids = read_ids(n_items, &mut pos)?;
    Ok(InteractionSet {
        interactions,
        n_users,
        n_items,
        user_ids,
        item_ids,
        duplicate_warnings: 0,
        small_user_warnings: 0,
    })
}

/// Two-column id map text: dense index, original id.
pub fn save_id_map(ids: &[String], path: &Path) -> Result<()> {
    let mut out = String::new();
    for (idx, id) in ids.iter().enumerate() {
        out.push_str(&format!("{idx}\t{id}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}
