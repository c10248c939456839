//! Deterministic synthetic cohort: records, volumes, masks, gold reports and
//! grounding links, written to a fixed directory layout.

mod config;
mod gold;
mod patient;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{CohortConfig, StageDistributions, TruncatedGaussian};
pub use gold::{conclusion_phrase, qualifier, render_gold_report, GoldReport, GroundingLink};
pub use patient::{
    generate_patient, group_thousands, infer_label, mask_from_ellipsoid, render_evidence, GeneratedPatient,
    LEFT_HIPPOCAMPUS, RIGHT_HIPPOCAMPUS, STRUCTURES,
};

use crate::error::{Error, Result};
use crate::numeric::{read_tensor, write_tensor, VoxelMask, VoxelVolume};
use crate::record::PatientRecord;
use crate::report::Label;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const GROUNDING_FILE: &str = "grounding.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "cohort_config.json";

/// Subject-wise partition of patient ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    /// 70/10/20 after a seeded shuffle; rounding leftovers go to test.
    pub fn subject_wise(ids: &[String], seed: u64) -> Self {
        let mut ids = ids.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151_7e57);
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_train = (0.7 * n as f64).round() as usize;
        let n_val = ((0.1 * n as f64).round() as usize).min(n - n_train);
        let test = ids.split_off(n_train + n_val);
        let val = ids.split_off(n_train);
        Self {
            train: ids,
            val,
            test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_patients: usize,
    /// Relative path to hex SHA-256.
    pub files: BTreeMap<String, String>,
}

/// A generated (or reloaded) cohort held in memory.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub config: CohortConfig,
    pub patients: Vec<GeneratedPatient>,
    pub gold: Vec<GoldReport>,
    pub split: Split,
}

/// Per-label counts by largest remainder, so proportions are met exactly
/// whenever they can be.
fn label_counts(mix: &[f64; 3], n: usize) -> [usize; 3] {
    let raw: Vec<f64> = mix.iter().map(|p| p * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = raw[i].floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if mix[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

fn patient_seed(seed: u64, index: usize) -> u64 {
    // SplitMix64 finalizer over (seed, index).
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn patient_id(index: usize) -> String {
    format!("p{index:04}")
}

impl Cohort {
    pub fn generate(config: &CohortConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_patients;
        let counts = label_counts(&config.label_mix, n);
        let mut labels: Vec<Label> = Label::ALL
            .iter()
            .zip(counts)
            .flat_map(|(&l, c)| std::iter::repeat_n(l, c))
            .collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
        let patients: Vec<GeneratedPatient> = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| generate_patient(config, &patient_id(i), patient_seed(config.seed, i), l))
            .collect();
        let gold = patients
            .iter()
            .map(|p| render_gold_report(&p.record, &config.thresholds))
            .collect();
        let ids: Vec<String> = patients.iter().map(|p| p.record.id.clone()).collect();
        let split = Split::subject_wise(&ids, config.seed);
        Ok(Self {
            config: config.clone(),
            patients,
            gold,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.patients.iter().position(|p| p.record.id == id)
    }

    pub fn patient(&self, id: &str) -> Option<&GeneratedPatient> {
        self.index_of(id).map(|i| &self.patients[i])
    }

    /// Indices of the patients in one part of the split.
    pub fn indices(&self, ids: &[String]) -> Vec<usize> {
        ids.iter().filter_map(|id| self.index_of(id)).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(&self.split.train)
    }

    pub fn val_indices(&self) -> Vec<usize> {
        self.indices(&self.split.val)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices(&self.split.test)
    }

    /// Writes every artifact under `dir` and returns the manifest.
    pub fn write(&self, dir: &Path) -> Result<Manifest> {
        for sub in ["volumes", "masks", "reports"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        let mut records = Vec::new();
        let mut grounding = Vec::new();
        for (p, g) in self.patients.iter().zip(&self.gold) {
            let id = &p.record.id;
            writeln!(records, "{}", serde_json::to_string(&p.record)?)?;
            for link in &g.links {
                writeln!(grounding, "{}", serde_json::to_string(link)?)?;
            }
            write_tensor(&dir.join(format!("volumes/{id}.emad")), &p.volume)?;
            for (s, m) in &p.masks {
                write_tensor(&dir.join(&p.record.mask_files[s]), m)?;
            }
            fs::write(dir.join(format!("reports/{id}.txt")), &g.text)?;
        }
        fs::write(dir.join(RECORDS_FILE), records)?;
        fs::write(dir.join(GROUNDING_FILE), grounding)?;
        fs::write(dir.join(SPLIT_FILE), serde_json::to_string_pretty(&self.split)?)?;
        fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&self.config)?)?;

        let manifest = Manifest {
            seed: self.config.seed,
            n_patients: self.len(),
            files: hash_tree(dir)?,
        };
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: CohortConfig = read_json(&dir.join(CONFIG_FILE))?;
        let split: Split = read_json(&dir.join(SPLIT_FILE))?;
        let records: Vec<PatientRecord> = read_jsonl(&dir.join(RECORDS_FILE))?;
        let links: Vec<GroundingLink> = read_jsonl(&dir.join(GROUNDING_FILE))?;
        let mut by_patient: BTreeMap<String, Vec<GroundingLink>> = BTreeMap::new();
        for l in links {
            by_patient.entry(l.patient_id.clone()).or_default().push(l);
        }
        let mut patients = Vec::with_capacity(records.len());
        let mut gold = Vec::with_capacity(records.len());
        for record in records {
            record.validate()?;
            let id = record.id.clone();
            let volume: VoxelVolume = read_tensor(&dir.join(format!("volumes/{id}.emad")))?;
            let mut masks: BTreeMap<String, VoxelMask> = BTreeMap::new();
            for (s, f) in &record.mask_files {
                masks.insert(s.clone(), read_tensor(&dir.join(f))?);
            }
            let text = fs::read_to_string(dir.join(format!("reports/{id}.txt")))?;
            gold.push(GoldReport {
                text,
                links: by_patient.remove(&id).unwrap_or_default(),
            });
            patients.push(GeneratedPatient {
                record,
                volume,
                masks,
            });
        }
        if patients.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self {
            config,
            patients,
            gold,
            split,
        })
    }
}

pub fn generate_cohort(config: &CohortConfig, dir: &Path) -> Result<Manifest> {
    Cohort::generate(config)?.write(dir)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hashes every file below `dir` except the manifest itself.
fn hash_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![PathBuf::from(dir)];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(dir)
                .expect("walk stays under root")
                .to_string_lossy()
                .replace('\\', "/");
            if rel == MANIFEST_FILE {
                continue;
            }
            out.insert(rel, sha256_hex(&fs::read(&path)?));
        }
    }
    Ok(out)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> CohortConfig {
        CohortConfig {
            n_patients: n,
            ..CohortConfig::default()
        }
    }

    #[test]
    fn split_ratios() {
        let c = Cohort::generate(&small(100)).unwrap();
        assert_eq!(
            (c.split.train.len(), c.split.val.len(), c.split.test.len()),
            (70, 10, 20)
        );
        let mut all: Vec<&String> = c.split.train.iter().chain(&c.split.val).chain(&c.split.test).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn label_counts_follow_mix() {
        assert_eq!(label_counts(&[1.0, 0.0, 0.0], 7), [7, 0, 0]);
        assert_eq!(label_counts(&[1.0 / 3.0; 3], 100).iter().sum::<usize>(), 100);
        assert_eq!(label_counts(&[0.5, 0.5, 0.0], 3), [2, 1, 0]);
        let c = Cohort::generate(&CohortConfig {
            n_patients: 12,
            label_mix: [1.0, 0.0, 0.0],
            ..CohortConfig::default()
        })
        .unwrap();
        assert!(c.patients.iter().all(|p| p.record.gt_label == Label::Cn));
    }

    #[test]
    fn write_load_round_trip_and_stable_manifest() {
        let cfg = small(6);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_cohort(&cfg, a.path()).unwrap();
        let mb = generate_cohort(&cfg, b.path()).unwrap();
        assert_eq!(ma, mb);
        assert!(ma.files.contains_key("records.jsonl"));
        assert!(ma.files.contains_key("masks/p0000_left_hippocampus.emad"));

        let mem = Cohort::generate(&cfg).unwrap();
        let disk = Cohort::load(a.path()).unwrap();
        assert_eq!(disk.split, mem.split);
        for (x, y) in disk.patients.iter().zip(&mem.patients) {
            assert_eq!(x, y);
        }
        for (x, y) in disk.gold.iter().zip(&mem.gold) {
            assert_eq!(x, y);
        }

        let other = tempfile::tempdir().unwrap();
        let mc = generate_cohort(&CohortConfig { seed: 1, ..cfg }, other.path()).unwrap();
        assert_ne!(mc.files["records.jsonl"], ma.files["records.jsonl"]);
    }
}
