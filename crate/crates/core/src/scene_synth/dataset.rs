//! Dataset assembly, on-disk layout and loading.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grammar::{generate_query, QueryRecord, TemplateGrammar};
use super::{generate_scene, SceneRecord, SynthConfig};
use crate::error::{Result, SatError};
use crate::projection2d::{scene_semantics, Semantics2D};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub scenes: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub queries: usize,
    pub train_queries: usize,
    pub val_queries: usize,
    pub semantics_records: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SynthConfig,
    pub seed: u64,
    pub config_hash: String,
    pub vocabulary: Vec<String>,
    pub counts: DatasetCounts,
    pub splits: DatasetSplits,
}

/// Scenes, queries and 2D records held in memory, with lookup tables.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub scenes: Vec<SceneRecord>,
    pub queries: Vec<QueryRecord>,
    /// `semantics[scene][proposal]` lists that proposal's records ordered by frame.
    pub semantics: Vec<Vec<Vec<Semantics2D>>>,
    scene_index: HashMap<String, usize>,
    train: Vec<usize>,
    val: Vec<usize>,
}

pub fn sha256_json<S: Serialize>(value: &S) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    hex::encode(Sha256::digest(&bytes))
}

fn group_semantics(scenes: &[SceneRecord], records: Vec<Semantics2D>) -> Result<Vec<Vec<Vec<Semantics2D>>>> {
    let index: HashMap<&str, usize> = scenes.iter().enumerate().map(|(i, s)| (s.scene_id.as_str(), i)).collect();
    let mut out: Vec<Vec<Vec<Semantics2D>>> = scenes.iter().map(|s| vec![Vec::new(); s.proposals.len()]).collect();
    for r in records {
        let &si = index
            .get(r.scene_id.as_str())
            .ok_or_else(|| SatError::Lookup(format!("2D record for unknown scene {}", r.scene_id)))?;
        let slot = out[si]
            .get_mut(r.proposal_id)
            .ok_or_else(|| SatError::Lookup(format!("2D record for unknown proposal {} in {}", r.proposal_id, r.scene_id)))?;
        slot.push(r);
    }
    for per_scene in &mut out {
        for recs in per_scene {
            recs.sort_by_key(|r| r.frame_id);
        }
    }
    Ok(out)
}

impl Dataset {
    fn assemble(manifest: DatasetManifest, scenes: Vec<SceneRecord>, queries: Vec<QueryRecord>, semantics: Vec<Semantics2D>) -> Result<Self> {
        let semantics = group_semantics(&scenes, semantics)?;
        let scene_index: HashMap<String, usize> = scenes.iter().enumerate().map(|(i, s)| (s.scene_id.clone(), i)).collect();
        let train_ids: BTreeSet<&str> = manifest.splits.train.iter().map(String::as_str).collect();
        let val_ids: BTreeSet<&str> = manifest.splits.val.iter().map(String::as_str).collect();
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (qi, q) in queries.iter().enumerate() {
            if !scene_index.contains_key(&q.scene_id) {
                return Err(SatError::Lookup(format!("query {} references unknown scene {}", q.query_id, q.scene_id)));
            }
            if train_ids.contains(q.scene_id.as_str()) {
                train.push(qi);
            } else if val_ids.contains(q.scene_id.as_str()) {
                val.push(qi);
            }
        }
        Ok(Self { manifest, scenes, queries, semantics, scene_index, train, val })
    }

    pub fn scene(&self, scene_id: &str) -> Result<&SceneRecord> {
        self.scene_position(scene_id).map(|i| &self.scenes[i])
    }

    pub fn scene_position(&self, scene_id: &str) -> Result<usize> {
        self.scene_index.get(scene_id).copied().ok_or_else(|| SatError::Lookup(format!("unknown scene {scene_id}")))
    }

    /// Query indices of the training split.
    pub fn train_queries(&self) -> &[usize] {
        &self.train
    }

    pub fn val_queries(&self) -> &[usize] {
        &self.val
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.config.classes.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.manifest.vocabulary.len()
    }

    pub fn max_query_len(&self) -> usize {
        self.queries.iter().map(|q| q.tokens.len()).max().unwrap_or(0)
    }

    /// Keeps only the first `train` and `val` scenes of each split.
    pub fn subset(&self, train: usize, val: usize) -> Result<Self> {
        let mut manifest = self.manifest.clone();
        manifest.splits.train.truncate(train);
        manifest.splits.val.truncate(val);
        let keep: BTreeSet<&str> = manifest.splits.train.iter().chain(&manifest.splits.val).map(String::as_str).collect();
        let scenes: Vec<SceneRecord> = self.scenes.iter().filter(|s| keep.contains(s.scene_id.as_str())).cloned().collect();
        let queries: Vec<QueryRecord> = self.queries.iter().filter(|q| keep.contains(q.scene_id.as_str())).cloned().collect();
        let sem: Vec<Semantics2D> = self
            .semantics
            .iter()
            .flatten()
            .flatten()
            .filter(|r| keep.contains(r.scene_id.as_str()))
            .cloned()
            .collect();
        manifest.counts = counts(&manifest.splits, &queries, sem.len());
        Self::assemble(manifest, scenes, queries, sem)
    }

    /// Concatenates datasets built from the same vocabulary and class list.
    pub fn concat(parts: Vec<Dataset>) -> Result<Self> {
        let mut iter = parts.into_iter();
        let first = iter.next().ok_or_else(|| SatError::Argument("no datasets to concatenate".into()))?;
        let mut manifest = first.manifest.clone();
        let mut scenes = first.scenes;
        let mut queries = first.queries;
        let mut sem: Vec<Semantics2D> = first.semantics.into_iter().flatten().flatten().collect();
        for d in iter {
            if d.manifest.vocabulary != manifest.vocabulary || d.manifest.config.classes != manifest.config.classes {
                return Err(SatError::Config("datasets disagree on vocabulary or classes".into()));
            }
            manifest.splits.train.extend(d.manifest.splits.train.iter().cloned());
            manifest.splits.val.extend(d.manifest.splits.val.iter().cloned());
            scenes.extend(d.scenes);
            queries.extend(d.queries);
            sem.extend(d.semantics.into_iter().flatten().flatten());
        }
        let ids: BTreeSet<&str> = scenes.iter().map(|s| s.scene_id.as_str()).collect();
        if ids.len() != scenes.len() {
            return Err(SatError::Config("datasets share scene ids".into()));
        }
        manifest.counts = counts(&manifest.splits, &queries, sem.len());
        Self::assemble(manifest, scenes, queries, sem)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| SatError::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| SatError::format(&mpath, e.to_string()))?;
        let scenes: Vec<SceneRecord> = read_jsonl(&dir.join("scenes.jsonl"))?;
        let queries: Vec<QueryRecord> = read_jsonl(&dir.join("queries.jsonl"))?;
        let sem: Vec<Semantics2D> = read_jsonl(&dir.join("semantics2d.jsonl"))?;
        Self::assemble(manifest, scenes, queries, sem)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| SatError::io(dir, e))?;
        let mpath = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).expect("serializable");
        fs::write(&mpath, text + "\n").map_err(|e| SatError::io(&mpath, e))?;
        write_jsonl(&dir.join("scenes.jsonl"), &self.scenes)?;
        write_jsonl(&dir.join("queries.jsonl"), &self.queries)?;
        let sem: Vec<&Semantics2D> = self.semantics.iter().flatten().flatten().collect();
        write_jsonl(&dir.join("semantics2d.jsonl"), &sem)
    }
}

fn counts(splits: &DatasetSplits, queries: &[QueryRecord], semantics_records: usize) -> DatasetCounts {
    let train: BTreeSet<&str> = splits.train.iter().map(String::as_str).collect();
    let train_queries = queries.iter().filter(|q| train.contains(q.scene_id.as_str())).count();
    DatasetCounts {
        scenes: splits.train.len() + splits.val.len(),
        train_scenes: splits.train.len(),
        val_scenes: splits.val.len(),
        queries: queries.len(),
        train_queries,
        val_queries: queries.len() - train_queries,
        semantics_records,
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| SatError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| SatError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SatError::format(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let f = File::create(path).map_err(|e| SatError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, it).expect("serializable");
        w.write_all(b"\n").map_err(|e| SatError::io(path, e))?;
    }
    w.flush().map_err(|e| SatError::io(path, e))
}

/// Scene `index` and its distinct queries. Scenes that admit no query are regenerated.
fn scene_with_queries(config: &SynthConfig, grammar: &TemplateGrammar, seed: u64, index: usize) -> Result<(SceneRecord, Vec<QueryRecord>)> {
    for regen in 0..config.max_attempts as u64 {
        let scene = generate_scene(config, derive_seed(seed, &[index as u64, regen]))?;
        let mut queries: Vec<QueryRecord> = Vec::new();
        for k in 0..(4 * config.queries_per_scene) as u64 {
            if queries.len() == config.queries_per_scene {
                break;
            }
            let q = match generate_query(&scene, grammar, derive_seed(seed, &[index as u64, regen, 1 << 32 | k])) {
                Ok(q) => q,
                Err(SatError::NoValidQuery(_)) => break,
                Err(e) => return Err(e),
            };
            if !queries.iter().any(|o| o.text == q.text) {
                queries.push(q);
            }
        }
        if !queries.is_empty() {
            for (j, q) in queries.iter_mut().enumerate() {
                q.query_id = format!("{}_q{j}", scene.scene_id);
            }
            return Ok((scene, queries));
        }
    }
    Err(SatError::Config(format!("scene {index}: no scene admitting a valid query within {} attempts", config.max_attempts)))
}

/// Builds the whole dataset in memory. Deterministic in `(config, seed)`.
pub fn generate_dataset(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let grammar = TemplateGrammar::new(config);
    let n = config.train_scenes + config.val_scenes;
    let mut scenes = Vec::with_capacity(n);
    let mut queries = Vec::new();
    let mut sem = Vec::new();
    for i in 0..n {
        let (scene, qs) = scene_with_queries(config, &grammar, seed, i)?;
        sem.extend(scene_semantics(&scene, config.classes.len()));
        queries.extend(qs);
        scenes.push(scene);
    }
    let ids: Vec<String> = scenes.iter().map(|s| s.scene_id.clone()).collect();
    let splits = DatasetSplits { train: ids[..config.train_scenes].to_vec(), val: ids[config.train_scenes..].to_vec() };
    let manifest = DatasetManifest {
        config: config.clone(),
        seed,
        config_hash: sha256_json(config),
        vocabulary: grammar.vocab.words.clone(),
        counts: counts(&splits, &queries, sem.len()),
        splits,
    };
    Dataset::assemble(manifest, scenes, queries, sem)
}

/// Generates the dataset and writes it to `out_dir`.
pub fn build_dataset(config: &SynthConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    let ds = generate_dataset(config, seed)?;
    ds.save(out_dir)?;
    Ok(ds.manifest)
}
