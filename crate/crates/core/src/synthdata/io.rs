//! Line-delimited JSON records with a manifest per dataset directory.
//!
//! Layout written by [`write_dataset`]:
//!
//! ```text
//! vocab.txt              one token per line, line number = id
//! world.json             the world inventories
//! scenes/manifest.json   scenes/{train,dev,test}.jsonl
//! <task>/manifest.json   <task>/{train,dev,test}.jsonl
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{derive_task_datasets, GroundedScene, SceneSplits, TaskDataset, TaskExamples, TaskKind, WorldSpec, SPLITS};
use crate::embeddings::Vocab;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator_seed: u64,
    pub task: TaskKind,
    pub counts: BTreeMap<String, usize>,
    pub visual_dim: usize,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Data {
            path: path.into(),
            detail: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Data {
            path: path.into(),
            detail: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data {
        path: path.into(),
        detail: e.to_string(),
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data {
        path: path.into(),
        detail: e.to_string(),
    })
}

fn task_dir(root: &Path, kind: TaskKind) -> PathBuf {
    match kind {
        TaskKind::Caption => root.join("scenes"),
        k => root.join(k.name()),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Seed for deriving task `TaskKind::DERIVED[kind_index]` over split
/// `SPLITS[split_index]`.
pub fn task_split_seed(seed: u64, kind_index: usize, split_index: usize) -> u64 {
    seed ^ ((kind_index as u64 + 1) << 32) ^ (split_index as u64 + 1)
}

/// Writes scenes, vocabulary, world, and every derived task for all splits.
pub fn write_dataset(root: &Path, splits: &SceneSplits, spec: &WorldSpec, seed: u64, visual_dim: usize) -> Result<()> {
    create_dir(root)?;
    spec.vocab()?.save(&root.join("vocab.txt"))?;
    write_json(&root.join("world.json"), spec)?;

    let scenes_dir = task_dir(root, TaskKind::Caption);
    create_dir(&scenes_dir)?;
    let mut counts = BTreeMap::new();
    for name in SPLITS {
        let s = splits.split(name)?;
        write_jsonl(&scenes_dir.join(format!("{name}.jsonl")), s)?;
        counts.insert(name.to_string(), s.len());
    }
    write_json(
        &scenes_dir.join("manifest.json"),
        &DatasetManifest {
            format_version: FORMAT_VERSION,
            generator_seed: seed,
            task: TaskKind::Caption,
            counts,
            visual_dim,
        },
    )?;

    for (k, kind) in TaskKind::DERIVED.into_iter().enumerate() {
        let dir = task_dir(root, kind);
        create_dir(&dir)?;
        let mut counts = BTreeMap::new();
        for (si, name) in SPLITS.into_iter().enumerate() {
            let scenes = splits.split(name)?;
            if scenes.len() < 2 {
                counts.insert(name.to_string(), 0);
                write_jsonl::<u8>(&dir.join(format!("{name}.jsonl")), &[])?;
                continue;
            }
            let task_seed = task_split_seed(seed, k, si);
            let d = derive_task_datasets(scenes, kind, spec, task_seed)?;
            let path = dir.join(format!("{name}.jsonl"));
            match &d.examples {
                TaskExamples::Caption => unreachable!("caption is not derived"),
                TaskExamples::Vqa(v) => write_jsonl(&path, v)?,
                TaskExamples::MultiChoice(v) => write_jsonl(&path, v)?,
                TaskExamples::Nlvr2(v) => write_jsonl(&path, v)?,
                TaskExamples::Grounding(v) => write_jsonl(&path, v)?,
            }
            counts.insert(name.to_string(), d.examples.len());
        }
        write_json(
            &dir.join("manifest.json"),
            &DatasetManifest {
                format_version: FORMAT_VERSION,
                generator_seed: seed,
                task: kind,
                counts,
                visual_dim,
            },
        )?;
    }
    Ok(())
}

pub fn read_manifest(root: &Path, kind: TaskKind) -> Result<DatasetManifest> {
    let path = task_dir(root, kind).join("manifest.json");
    let m: DatasetManifest = read_json(&path)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Data {
            path,
            detail: format!("format version {} unsupported", m.format_version),
        });
    }
    if m.task != kind {
        return Err(Error::Input(format!(
            "manifest at {} describes {:?}, expected {:?}",
            path.display(),
            m.task,
            kind
        )));
    }
    Ok(m)
}

fn check_count(m: &DatasetManifest, split: &str, found: usize, path: &Path) -> Result<()> {
    match m.counts.get(split) {
        Some(&n) if n == found => Ok(()),
        Some(&n) => Err(Error::Input(format!(
            "{} holds {found} records, manifest says {n}",
            path.display()
        ))),
        None => Err(Error::Input(format!("manifest has no split {split:?}"))),
    }
}

pub fn read_vocab(root: &Path) -> Result<Vocab> {
    Vocab::load(&root.join("vocab.txt"))
}

pub fn read_world(root: &Path) -> Result<WorldSpec> {
    read_json(&root.join("world.json"))
}

pub fn read_scenes(root: &Path, split: &str) -> Result<Vec<GroundedScene>> {
    let m = read_manifest(root, TaskKind::Caption)?;
    let path = task_dir(root, TaskKind::Caption).join(format!("{split}.jsonl"));
    let scenes: Vec<GroundedScene> = read_jsonl(&path)?;
    check_count(&m, split, scenes.len(), &path)?;
    for s in &scenes {
        for r in &s.regions {
            r.region.validate(m.visual_dim).map_err(|e| Error::Data {
                path: path.clone(),
                detail: format!("scene {}: {e}", s.id),
            })?;
        }
    }
    Ok(scenes)
}

/// Loads one task split with the scenes it references.
pub fn read_task(root: &Path, kind: TaskKind, split: &str) -> Result<TaskDataset> {
    let scenes = read_scenes(root, split)?;
    if kind == TaskKind::Caption {
        return Ok(TaskDataset {
            scenes,
            examples: TaskExamples::Caption,
        });
    }
    let m = read_manifest(root, kind)?;
    let path = task_dir(root, kind).join(format!("{split}.jsonl"));
    let examples = match kind {
        TaskKind::Vqa => TaskExamples::Vqa(read_jsonl(&path)?),
        TaskKind::MultiChoice => TaskExamples::MultiChoice(read_jsonl(&path)?),
        TaskKind::Nlvr2 => TaskExamples::Nlvr2(read_jsonl(&path)?),
        TaskKind::Grounding => TaskExamples::Grounding(read_jsonl(&path)?),
        TaskKind::Caption => unreachable!(),
    };
    check_count(&m, split, examples.len(), &path)?;
    Ok(TaskDataset { scenes, examples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scenes, GeneratorConfig};

    fn config() -> GeneratorConfig {
        GeneratorConfig {
            seed: 21,
            n_train: 40,
            n_dev: 10,
            n_test: 10,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn dataset_round_trips_and_is_byte_stable() {
        let spec = WorldSpec::default();
        let splits = generate_scenes(&config(), &spec).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &splits, &spec, 21, 64).unwrap();
        write_dataset(b.path(), &generate_scenes(&config(), &spec).unwrap(), &spec, 21, 64).unwrap();
        for rel in ["vocab.txt", "world.json", "scenes/train.jsonl", "nlvr2/dev.jsonl", "multichoice/manifest.json"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
        assert_eq!(read_scenes(a.path(), "dev").unwrap(), splits.dev);
        assert_eq!(read_world(a.path()).unwrap(), spec);
        assert_eq!(read_vocab(a.path()).unwrap(), spec.vocab().unwrap());
        let t = read_task(a.path(), TaskKind::Grounding, "test").unwrap();
        assert_eq!(t.examples.len(), 50);
        assert_eq!(read_manifest(a.path(), TaskKind::Vqa).unwrap().counts["train"], 80);
    }

    #[test]
    fn manifest_mismatch_is_an_input_error() {
        let spec = WorldSpec::default();
        let splits = generate_scenes(&config(), &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &splits, &spec, 21, 64).unwrap();
        let path = dir.path().join("scenes/dev.jsonl");
        let text = fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        fs::write(&path, format!("{first}\n")).unwrap();
        assert!(matches!(read_scenes(dir.path(), "dev"), Err(Error::Input(_))));
        fs::write(&path, "{not json\n").unwrap();
        assert!(matches!(read_scenes(dir.path(), "dev"), Err(Error::Data { .. })));
    }
}
