//! COCO-style annotation parsing, dataset assembly and split construction.
//!
//! Expected directory layout:
//!
//! ```text
//! <data_dir>/
//!   images/                          *.png / *.jpg
//!   annotations/instances_train.json
//!   annotations/instances_val.json
//!   annotations/captions_train.json
//!   annotations/captions_val.json
//!   splits/                          written by `build_splits`
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::vocab::{CategoryTable, Vocabulary, WordVectors};
use super::{filter_instances, ImageRecord};
use crate::config::DataConfig;
use crate::rng::Stream;
use crate::{Error, Result};

#[derive(Deserialize)]
struct InstancesJson {
    images: Vec<ImageJson>,
    annotations: Vec<AnnotationJson>,
    categories: Vec<CategoryJson>,
}

#[derive(Deserialize)]
struct ImageJson {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Deserialize)]
struct AnnotationJson {
    image_id: u64,
    category_id: u32,
    /// COCO convention: (x, y, w, h) in pixels.
    bbox: [f32; 4],
}

#[derive(Deserialize)]
struct CategoryJson {
    id: u32,
    name: String,
}

#[derive(Deserialize)]
struct CaptionsJson {
    annotations: Vec<CaptionAnnotationJson>,
}

#[derive(Deserialize)]
struct CaptionAnnotationJson {
    image_id: u64,
    caption: String,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Config(format!("missing annotation file {}: {e}", path.display()))
    })?;
    serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Parse one (instances, captions) pair into raw records. Boxes are converted
/// to corners and clamped to image bounds.
fn parse_split(
    data_dir: &Path,
    tag: &str,
) -> Result<(Vec<ImageRecord>, Vec<(u32, String)>)> {
    let inst: InstancesJson =
        read_json(&data_dir.join("annotations").join(format!("instances_{tag}.json")))?;
    let caps: CaptionsJson =
        read_json(&data_dir.join("annotations").join(format!("captions_{tag}.json")))?;

    let mut captions_by_image: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    for c in caps.annotations {
        captions_by_image.entry(c.image_id).or_default().push(c.caption);
    }
    let mut objects_by_image: BTreeMap<u64, Vec<(u32, [f32; 4])>> = BTreeMap::new();
    for a in inst.annotations {
        let [x, y, w, h] = a.bbox;
        objects_by_image
            .entry(a.image_id)
            .or_default()
            .push((a.category_id, [x, y, x + w, y + h]));
    }

    let mut records = Vec::new();
    for img in inst.images {
        let mut objects = objects_by_image.remove(&img.id).unwrap_or_default();
        for (_c, b) in objects.iter_mut() {
            b[0] = b[0].clamp(0.0, img.width as f32);
            b[1] = b[1].clamp(0.0, img.height as f32);
            b[2] = b[2].clamp(0.0, img.width as f32);
            b[3] = b[3].clamp(0.0, img.height as f32);
        }
        let captions = captions_by_image.remove(&img.id).unwrap_or_default();
        records.push(ImageRecord {
            image_id: img.id,
            image_path: data_dir.join("images").join(&img.file_name),
            width: img.width,
            height: img.height,
            objects,
            captions,
        });
    }
    let categories = inst.categories.into_iter().map(|c| (c.id, c.name)).collect();
    Ok((records, categories))
}

/// Split index: ordered image ids belonging to one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndex {
    pub name: String,
    pub image_ids: Vec<u64>,
}

impl SplitIndex {
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.txt", self.name));
        let body: String = self
            .image_ids
            .iter()
            .map(|id| format!("{id}\n"))
            .collect();
        std::fs::write(&path, body)?;
        Ok(path)
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let path = dir.join(format!("{name}.txt"));
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("missing split index {}: {e}", path.display())))?;
        let image_ids = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| l.parse().map_err(|e| Error::Data(format!("bad id `{l}`: {e}"))))
            .collect::<Result<Vec<u64>>>()?;
        Ok(SplitIndex {
            name: name.to_string(),
            image_ids,
        })
    }
}

/// Build train/val/test indices. Train keeps every filtered training record;
/// validation and test are drawn (seeded shuffle) from the filtered
/// validation records only, then written under `splits/`.
pub fn build_splits(
    data_dir: &Path,
    cfg: &DataConfig,
    seed: u64,
) -> Result<(SplitIndex, SplitIndex, SplitIndex)> {
    let (train_records, _) = parse_split(data_dir, "train")?;
    let (val_records, _) = parse_split(data_dir, "val")?;

    let keep = |records: Vec<ImageRecord>| -> Vec<u64> {
        records
            .into_iter()
            .filter_map(|r| {
                filter_instances(r, cfg.min_area_frac, cfg.min_objects, cfg.max_objects).kept()
            })
            .filter(|r| !r.captions.is_empty())
            .map(|r| r.image_id)
            .collect()
    };

    let train_ids = keep(train_records);
    let mut pool = keep(val_records);
    let mut stream = Stream::new(seed, "splits");
    let perm = stream.permutation(pool.len());
    pool = perm.into_iter().map(|i| pool[i]).collect();

    let (n_val, n_test) = if pool.len() >= cfg.val_size + cfg.test_size {
        (cfg.val_size, cfg.test_size)
    } else {
        // Shortfall: split the pool proportionally to the requested sizes.
        let total = (cfg.val_size + cfg.test_size).max(1);
        let n_val = (pool.len() * cfg.val_size + total / 2) / total;
        (n_val, pool.len() - n_val)
    };

    let train = SplitIndex {
        name: "train".into(),
        image_ids: train_ids,
    };
    let val = SplitIndex {
        name: "val".into(),
        image_ids: pool[..n_val].to_vec(),
    };
    let test = SplitIndex {
        name: "test".into(),
        image_ids: pool[n_val..n_val + n_test].to_vec(),
    };
    let splits_dir = data_dir.join("splits");
    train.save(&splits_dir)?;
    val.save(&splits_dir)?;
    test.save(&splits_dir)?;
    Ok((train, val, test))
}

/// A fully-loaded dataset: filtered records, vocabulary and category table.
pub struct Dataset {
    pub records: BTreeMap<u64, ImageRecord>,
    pub vocab: Vocabulary,
    pub categories: CategoryTable,
}

impl Dataset {
    /// Load and filter both annotation splits, building the vocabulary from
    /// training captions.
    pub fn load(data_dir: &Path, cfg: &DataConfig) -> Result<Self> {
        let vectors = match &cfg.glove_path {
            Some(p) => WordVectors::from_glove_file(p, 50)?,
            None => WordVectors::synthetic(50),
        };
        let (train_records, categories) = parse_split(data_dir, "train")?;
        let (val_records, _) = parse_split(data_dir, "val")?;

        let vocab = Vocabulary::build(
            train_records
                .iter()
                .flat_map(|r| r.captions.iter().cloned()),
            &vectors,
        );
        let categories = CategoryTable::new(categories, &vectors);

        let mut records = BTreeMap::new();
        for r in train_records.into_iter().chain(val_records) {
            if let Some(kept) =
                filter_instances(r, cfg.min_area_frac, cfg.min_objects, cfg.max_objects).kept()
            {
                if !kept.captions.is_empty() {
                    records.insert(kept.image_id, kept);
                }
            }
        }
        Ok(Dataset {
            records,
            vocab,
            categories,
        })
    }

    pub fn record(&self, image_id: u64) -> Result<&ImageRecord> {
        self.records
            .get(&image_id)
            .ok_or_else(|| Error::Data(format!("unknown image id {image_id}")))
    }
}
