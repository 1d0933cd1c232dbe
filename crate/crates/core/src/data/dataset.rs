//! JSONL persistence of samples and synthetic corpus generation.
//!
//! Each line is `{"source", "image", "boxes", "concepts", "category_ids"?}` where
//! `image` is either `{"seed", "spec_id"}` (regenerated on load) or an inline
//! base85 RGB buffer `{"b85", "h", "w"}`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::concept::ConceptDictionary;
use crate::data::sample::{Image, Source, UnifiedSample};
use crate::data::scene::{render_scene, Scene, SceneSpec};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Seed { seed: u64, spec_id: String },
    Inline { b85: String, h: usize, w: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub source: Source,
    pub image: ImageRef,
    pub boxes: Vec<BBox>,
    pub concepts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_ids: Option<Vec<usize>>,
}

impl SampleRecord {
    pub fn from_sample(sample: &UnifiedSample, image: ImageRef) -> Self {
        Self {
            source: sample.source,
            image,
            boxes: sample.boxes.clone(),
            concepts: sample.concepts.clone(),
            category_ids: sample.category_ids.clone(),
        }
    }

    pub fn inline(sample: &UnifiedSample) -> Self {
        let img = &sample.image;
        Self::from_sample(
            sample,
            ImageRef::Inline {
                b85: base85::encode(img.raw()),
                h: img.height(),
                w: img.width(),
            },
        )
    }
}

/// A sample as loaded from disk, with the scene seed when it was seed-referenced.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub sample: UnifiedSample,
    pub seed: Option<u64>,
}

/// Scene specs by id, used to regenerate seed-referenced images.
#[derive(Debug, Clone, Default)]
pub struct SpecRegistry {
    specs: HashMap<String, SceneSpec>,
}

impl SpecRegistry {
    pub fn with_default() -> Self {
        let mut r = Self::default();
        r.insert(SceneSpec::default());
        r
    }

    pub fn insert(&mut self, spec: SceneSpec) {
        self.specs.insert(spec.id.clone(), spec);
    }

    pub fn get(&self, id: &str) -> Option<&SceneSpec> {
        self.specs.get(id)
    }
}

fn dataset_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write_jsonl(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<SampleRecord>> {
    let file = File::open(path).map_err(|e| dataset_err(path, e.to_string()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line)
            .map_err(|e| dataset_err(path, format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Load and validate every record; seed-referenced images are re-rendered.
pub fn load_jsonl(path: &Path, registry: &SpecRegistry) -> Result<Vec<LoadedSample>> {
    let records = read_records(path)?;
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.into_iter().enumerate() {
        let (image, seed) = match &rec.image {
            ImageRef::Seed { seed, spec_id } => {
                let spec = registry
                    .get(spec_id)
                    .ok_or_else(|| dataset_err(path, format!("line {}: unknown spec {spec_id:?}", i + 1)))?;
                (render_scene(*seed, spec)?.image, Some(*seed))
            }
            ImageRef::Inline { b85, h, w } => {
                let bytes = base85::decode(b85)
                    .map_err(|e| dataset_err(path, format!("line {}: bad base85: {e:?}", i + 1)))?;
                (Image::from_raw(*h, *w, bytes)?, None)
            }
        };
        let sample = UnifiedSample {
            image,
            boxes: rec.boxes,
            concepts: rec.concepts,
            source: rec.source,
            category_ids: rec.category_ids,
        };
        sample
            .validate()
            .map_err(|e| dataset_err(path, format!("line {}: {e}", i + 1)))?;
        out.push(LoadedSample { sample, seed });
    }
    Ok(out)
}

/// Named splits of a generated corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    DetTrain,
    CapTrain,
    Val,
    Test,
}

impl Split {
    fn index(self) -> u64 {
        match self {
            Split::DetTrain => 0,
            Split::CapTrain => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

/// Scene seed for item `i` of `split` under corpus seed `base`.
pub fn scene_seed(base: u64, split: Split, i: u64) -> u64 {
    (base << 36) ^ (split.index() << 32) ^ i
}

/// Detection-style annotation of *every* object (held-out ones included),
/// with `category_ids` indexing `spec.all_combos()`. Used as evaluation ground truth.
pub fn full_detection_sample(scene: &Scene, spec: &SceneSpec) -> UnifiedSample {
    let combos = spec.all_combos();
    let mut s = UnifiedSample {
        image: scene.image.clone(),
        boxes: Vec::new(),
        concepts: Vec::new(),
        source: Source::Detection,
        category_ids: Some(Vec::new()),
    };
    for o in &scene.objects {
        s.boxes.push(o.bbox);
        s.concepts
            .push(format!("{}, {}.", o.combo.category(), o.combo.definition()));
        if let Some(ids) = s.category_ids.as_mut() {
            ids.push(combos.iter().position(|c| *c == o.combo).unwrap_or(0));
        }
    }
    s
}

/// In-memory corpus with the same layout `capdet gen-data` writes to disk.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: SceneSpec,
    pub dictionary: ConceptDictionary,
    pub det_train: Vec<LoadedSample>,
    pub cap_train: Vec<LoadedSample>,
    pub det_val: Vec<LoadedSample>,
    pub cap_val: Vec<LoadedSample>,
    pub det_test: Vec<LoadedSample>,
    pub cap_test: Vec<LoadedSample>,
}

pub const CORPUS_FILES: [&str; 6] = [
    "det_train.jsonl",
    "cap_train.jsonl",
    "det_val.jsonl",
    "cap_val.jsonl",
    "det_test.jsonl",
    "cap_test.jsonl",
];

impl Corpus {
    /// `train_count` scenes per training source, `eval_count` scenes for each of val and test.
    ///
    /// Detection training scenes never contain held-out combinations; caption
    /// training scenes and evaluation scenes draw from every combination. The
    /// dictionary holds every combination, with frequency equal to the number
    /// of detection training images containing it.
    pub fn generate(spec: &SceneSpec, train_count: usize, eval_count: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (base_spec, full_spec) = split_specs(spec);
        let mut dictionary = spec.dictionary(true);
        let mut counts: HashMap<String, u64> = HashMap::new();

        let mut det_train = Vec::with_capacity(train_count);
        for i in 0..train_count as u64 {
            let s = scene_seed(seed, Split::DetTrain, i);
            let scene = render_scene(s, &base_spec)?;
            let sample = scene.detection_sample(&base_spec)?;
            let mut present: Vec<String> =
                scene.objects.iter().map(|o| o.combo.category()).collect();
            present.sort();
            present.dedup();
            for c in present {
                *counts.entry(c).or_default() += 1;
            }
            det_train.push(LoadedSample {
                sample: remap_category_ids(sample, &scene, spec),
                seed: Some(s),
            });
        }
        for (name, n) in counts {
            dictionary.set_frequency(&name, n);
        }

        let cap_train = (0..train_count as u64)
            .map(|i| {
                let s = scene_seed(seed, Split::CapTrain, i);
                let scene = render_scene(s, &full_spec)?;
                Ok(LoadedSample {
                    sample: scene.caption_sample(&full_spec)?,
                    seed: Some(s),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let eval_split = |split: Split| -> Result<(Vec<LoadedSample>, Vec<LoadedSample>)> {
            let mut det = Vec::with_capacity(eval_count);
            let mut cap = Vec::with_capacity(eval_count);
            for i in 0..eval_count as u64 {
                let s = scene_seed(seed, split, i);
                let scene = render_scene(s, &full_spec)?;
                det.push(LoadedSample {
                    sample: full_detection_sample(&scene, &full_spec),
                    seed: Some(s),
                });
                cap.push(LoadedSample {
                    sample: scene.caption_sample(&full_spec)?,
                    seed: Some(s),
                });
            }
            Ok((det, cap))
        };
        let (det_val, cap_val) = eval_split(Split::Val)?;
        let (det_test, cap_test) = eval_split(Split::Test)?;

        Ok(Self {
            spec: spec.clone(),
            dictionary,
            det_train,
            cap_train,
            det_val,
            cap_val,
            det_test,
            cap_test,
        })
    }

    fn splits(&self) -> [&Vec<LoadedSample>; 6] {
        [
            &self.det_train,
            &self.cap_train,
            &self.det_val,
            &self.cap_val,
            &self.det_test,
            &self.cap_test,
        ]
    }

    /// Write the corpus into `dir`; returns the paths written.
    pub fn write(&self, dir: &Path, inline_images: bool) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        let spec_path = dir.join(SPEC_FILE);
        let (base, full) = split_specs(&self.spec);
        std::fs::write(&spec_path, serde_json::to_string_pretty(&[base, full])? + "\n")?;
        written.push(spec_path);
        let dict_path = dir.join("dictionary.json");
        self.dictionary.save(&dict_path)?;
        written.push(dict_path);
        for (name, split) in CORPUS_FILES.iter().zip(self.splits()) {
            let records: Vec<SampleRecord> = split
                .iter()
                .map(|ls| match (inline_images, ls.seed) {
                    (false, Some(seed)) => SampleRecord::from_sample(
                        &ls.sample,
                        ImageRef::Seed {
                            seed,
                            spec_id: spec_id_for(&self.spec, ls.sample.source, name),
                        },
                    ),
                    _ => SampleRecord::inline(&ls.sample),
                })
                .collect();
            let p = dir.join(name);
            write_jsonl(&p, &records)?;
            written.push(p);
        }
        Ok(written)
    }
}

/// Detection training samples index categories in `spec.all_combos()` order.
fn remap_category_ids(mut sample: UnifiedSample, scene: &Scene, spec: &SceneSpec) -> UnifiedSample {
    let combos = spec.all_combos();
    let ids = scene
        .objects
        .iter()
        .filter(|o| !o.held_out)
        .map(|o| combos.iter().position(|c| *c == o.combo).unwrap_or(0))
        .collect();
    sample.category_ids = Some(ids);
    sample
}

pub const SPEC_FILE: &str = "scene_specs.json";

/// The base-only variant (id suffixed `-base`) and the full variant of `spec`.
pub fn split_specs(spec: &SceneSpec) -> (SceneSpec, SceneSpec) {
    let mut base = spec.clone().with_held_out(false);
    base.id = format!("{}-base", spec.id);
    (base, spec.clone().with_held_out(true))
}

fn spec_id_for(spec: &SceneSpec, source: Source, file: &str) -> String {
    if source == Source::Detection && file == CORPUS_FILES[0] {
        format!("{}-base", spec.id)
    } else {
        spec.id.clone()
    }
}

/// Registry holding the specs stored next to a dataset file, plus the default spec.
pub fn registry_for(dataset: &Path) -> Result<SpecRegistry> {
    let mut reg = SpecRegistry::with_default();
    let (base, _) = split_specs(&SceneSpec::default());
    reg.insert(base);
    if let Some(dir) = dataset.parent() {
        let p = dir.join(SPEC_FILE);
        if p.exists() {
            let specs: Vec<SceneSpec> = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
            for spec in specs {
                reg.insert(spec);
            }
        }
    }
    Ok(reg)
}
