use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::{generate_sample, TaskKind, TrajectorySample, Variant, JIGSAW_SIZE, MIN_SIZE};

pub const TRAJECTORIES_PER_SFT_SAMPLE: usize = 3;
const PARTITION_BITS: u32 = 61;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Sft,
    Rl,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(Split::Sft),
            "rl" => Ok(Split::Rl),
            "test" => Ok(Split::Test),
            _ => Err(Error::config("split", format!("unknown split {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Sft => "sft",
            Split::Rl => "rl",
            Split::Test => "test",
        }
    }

    /// Half-open range of sample seeds this split may use.
    pub fn seed_range(self) -> (u64, u64) {
        let lo = (self as u64) << PARTITION_BITS;
        (lo, lo + (1 << PARTITION_BITS))
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of base sample `index`, inside the split's partition.
pub fn sample_seed(split: Split, seed: u64, index: u64) -> u64 {
    let (lo, _) = split.seed_range();
    lo + (splitmix64(splitmix64(seed) ^ index) & ((1 << PARTITION_BITS) - 1))
}

/// Grid sizes for `n_total` base samples in ratio 1:2:3:4 over sizes 3..=6.
pub fn level_schedule(n_total: usize) -> Result<Vec<usize>> {
    if !n_total.is_multiple_of(10) {
        return Err(Error::config("n", format!("grid datasets need a multiple of 10 samples, got {n_total}")));
    }
    let unit = n_total / 10;
    Ok((0..4).flat_map(|i| std::iter::repeat_n(MIN_SIZE + i, unit * (i + 1))).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub task: TaskKind,
    pub split: Split,
    pub variant: Variant,
    pub seed: u64,
    pub n_total: usize,
    pub n_lines: usize,
    pub seed_lo: u64,
    pub seed_hi: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<TrajectorySample>,
}

impl Dataset {
    /// Base samples only (one per question), in file order.
    pub fn questions(&self) -> Vec<&TrajectorySample> {
        let mut seen = std::collections::HashSet::new();
        self.samples.iter().filter(|s| seen.insert(s.seed)).collect()
    }

    pub fn filter_levels(&self, levels: &[usize]) -> Dataset {
        let samples: Vec<_> = self.samples.iter().filter(|s| levels.contains(&s.level)).cloned().collect();
        Dataset { meta: DatasetMeta { n_lines: samples.len(), ..self.meta.clone() }, samples }
    }
}

/// Builds a dataset in memory. Grid tasks use sizes 3:4:5:6 in ratio
/// 1:2:3:4; the sft split carries three phrasings per base sample; rl and
/// test carry question and answer only.
pub fn build_dataset(task: TaskKind, n_total: usize, split: Split, seed: u64, variant: Variant) -> Result<Dataset> {
    let levels = if task.is_grid() { level_schedule(n_total)? } else { vec![JIGSAW_SIZE; n_total] };
    let mut samples = Vec::new();
    for (i, &level) in levels.iter().enumerate() {
        let s = sample_seed(split, seed, i as u64);
        match split {
            Split::Sft => {
                for t in 0..TRAJECTORIES_PER_SFT_SAMPLE as u64 {
                    let mut sample = generate_sample(task, level, s, variant, Some(s.wrapping_add(t)))?;
                    sample.id = format!("{}-t{t}", sample.id);
                    samples.push(sample);
                }
            }
            Split::Rl | Split::Test => samples.push(generate_sample(task, level, s, variant, None)?),
        }
    }
    let (seed_lo, seed_hi) = split.seed_range();
    let meta = DatasetMeta { task, split, variant, seed, n_total, n_lines: samples.len(), seed_lo, seed_hi };
    Ok(Dataset { meta, samples })
}

pub fn dataset_file_name(task: TaskKind, split: Split, variant: Variant) -> String {
    format!("{}_{}_{}.jsonl", task.name(), split.name(), variant.name())
}

pub fn meta_path(jsonl: &Path) -> PathBuf {
    jsonl.with_extension("meta.json")
}

/// Writes the JSONL file and its `.meta.json` sidecar.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for s in &ds.samples {
        writeln!(w, "{}", s.to_json_line()?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let mp = meta_path(path);
    std::fs::write(&mp, serde_json::to_string_pretty(&ds.meta)? + "\n").map_err(|e| Error::io(&mp, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mp = meta_path(path);
    let meta_text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s = TrajectorySample::from_json_line(&line).map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if s.seed < meta.seed_lo || s.seed >= meta.seed_hi {
            return Err(Error::Dataset(format!("{}:{}: seed outside the split's range", path.display(), i + 1)));
        }
        samples.push(s);
    }
    if samples.len() != meta.n_lines {
        return Err(Error::Dataset(format!("{} has {} lines, metadata says {}", path.display(), samples.len(), meta.n_lines)));
    }
    Ok(Dataset { meta, samples })
}

/// Rejects datasets whose seed ranges or sample seeds overlap.
pub fn verify_disjoint(a: &Dataset, b: &Dataset) -> Result<()> {
    let overlap = a.meta.seed_lo < b.meta.seed_hi && b.meta.seed_lo < a.meta.seed_hi;
    if overlap {
        return Err(Error::Dataset(format!(
            "{} split seeds [{}, {}) overlap {} split seeds [{}, {})",
            a.meta.split.name(),
            a.meta.seed_lo,
            a.meta.seed_hi,
            b.meta.split.name(),
            b.meta.seed_lo,
            b.meta.seed_hi
        )));
    }
    let seeds: std::collections::HashSet<u64> = a.samples.iter().map(|s| s.seed).collect();
    if let Some(s) = b.samples.iter().find(|s| seeds.contains(&s.seed)) {
        return Err(Error::Dataset(format!("sample seed {} appears in both datasets", s.seed)));
    }
    Ok(())
}
