//! Dataset ingestion: COCO-style annotations (or the synthetic stand-in),
//! instance filtering, vocabulary construction, split management and example
//! loading.

pub mod coco;
pub mod loader;
pub mod synthetic;
pub mod vocab;

use candle_core::Tensor;

pub use coco::{build_splits, Dataset, SplitIndex};
pub use loader::{ExampleBatch, Loader};
pub use synthetic::make_synthetic_dataset;
pub use vocab::{tokenize, CategoryTable, Vocabulary};

/// One annotated image: identity, geometry, labeled boxes and raw captions.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub image_path: std::path::PathBuf,
    pub width: u32,
    pub height: u32,
    /// (category id, pixel box x0,y0,x1,y1)
    pub objects: Vec<(u32, [f32; 4])>,
    pub captions: Vec<String>,
}

/// Result of instance filtering.
#[derive(Debug)]
pub enum FilterOutcome {
    Kept(ImageRecord),
    Rejected { image_id: u64, reason: String },
}

impl FilterOutcome {
    pub fn kept(self) -> Option<ImageRecord> {
        match self {
            FilterOutcome::Kept(r) => Some(r),
            FilterOutcome::Rejected { .. } => None,
        }
    }
}

/// Drop undersized objects, then reject the record when the surviving count
/// falls outside `[min_objects, max_objects]`. A box with non-positive extent
/// rejects the whole record.
pub fn filter_instances(
    record: ImageRecord,
    min_area_frac: f64,
    min_objects: usize,
    max_objects: usize,
) -> FilterOutcome {
    let image_area = (record.width as f64) * (record.height as f64);
    for (_cat, b) in &record.objects {
        if !(b[2] > b[0] && b[3] > b[1]) {
            log::warn!(
                "image {}: malformed box {:?} (non-positive extent), record rejected",
                record.image_id,
                b
            );
            return FilterOutcome::Rejected {
                image_id: record.image_id,
                reason: format!("malformed box {b:?}"),
            };
        }
    }
    let min_area = min_area_frac * image_area;
    let kept: Vec<(u32, [f32; 4])> = record
        .objects
        .iter()
        .copied()
        .filter(|(_c, b)| {
            let area = ((b[2] - b[0]) as f64) * ((b[3] - b[1]) as f64);
            area >= min_area
        })
        .collect();
    if kept.len() < min_objects || kept.len() > max_objects {
        return FilterOutcome::Rejected {
            image_id: record.image_id,
            reason: format!("{} objects after area filter", kept.len()),
        };
    }
    FilterOutcome::Kept(ImageRecord {
        objects: kept,
        ..record
    })
}

/// One training example with images at every requested resolution.
pub struct TrainingExample {
    pub image_id: u64,
    /// resolution -> (3, res, res) tensor in [-1, 1]
    pub images: Vec<(usize, Tensor)>,
    /// Label indices into the category table.
    pub object_label_ids: Vec<usize>,
    /// Normalized (x0, y0, x1, y1), each in [0, 1].
    pub boxes_gt: Vec<[f32; 4]>,
    /// Padded to the configured max caption length; 0 is the pad id.
    pub caption_token_ids: Vec<u32>,
}

impl TrainingExample {
    pub fn image_at(&self, resolution: usize) -> Option<&Tensor> {
        self.images
            .iter()
            .find(|(r, _)| *r == resolution)
            .map(|(_, t)| t)
    }

    pub fn n_objects(&self) -> usize {
        self.object_label_ids.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(objects: Vec<(u32, [f32; 4])>) -> ImageRecord {
        ImageRecord {
            image_id: 1,
            image_path: "none.png".into(),
            width: 100,
            height: 100,
            objects,
            captions: vec!["a test caption".into()],
        }
    }

    #[test]
    fn undersized_object_is_dropped() {
        // 5 objects, one covering 1% of the area: 4 retained.
        let mut objs = vec![
            (0, [0.0, 0.0, 30.0, 30.0]),
            (1, [40.0, 0.0, 80.0, 30.0]),
            (2, [0.0, 40.0, 30.0, 80.0]),
            (3, [40.0, 40.0, 90.0, 90.0]),
        ];
        objs.push((4, [0.0, 0.0, 10.0, 10.0])); // 1% area
        let out = filter_instances(record(objs), 0.02, 3, 8);
        let kept = out.kept().unwrap();
        assert_eq!(kept.objects.len(), 4);
        assert!(kept.objects.iter().all(|(c, _)| *c != 4));
    }

    #[test]
    fn filter_is_identity_when_all_pass() {
        let objs = vec![
            (0, [0.0, 0.0, 30.0, 30.0]),
            (1, [40.0, 0.0, 80.0, 30.0]),
            (2, [0.0, 40.0, 30.0, 80.0]),
        ];
        let rec = record(objs.clone());
        let out = filter_instances(rec, 0.02, 3, 8).kept().unwrap();
        assert_eq!(out.objects, objs);
    }

    #[test]
    fn too_many_objects_rejects_record() {
        let objs: Vec<(u32, [f32; 4])> = (0..10)
            .map(|i| (i, [0.0, 0.0, 50.0, 50.0]))
            .collect();
        assert!(filter_instances(record(objs), 0.02, 3, 8).kept().is_none());
    }

    #[test]
    fn malformed_box_rejects_record() {
        let objs = vec![
            (0, [0.0, 0.0, 30.0, 30.0]),
            (1, [40.0, 0.0, 80.0, 30.0]),
            (2, [50.0, 50.0, 50.0, 80.0]), // zero width
        ];
        assert!(filter_instances(record(objs), 0.02, 3, 8).kept().is_none());
    }

    #[test]
    fn filtering_is_idempotent() {
        let objs = vec![
            (0, [0.0, 0.0, 30.0, 30.0]),
            (1, [40.0, 0.0, 80.0, 30.0]),
            (2, [0.0, 40.0, 30.0, 80.0]),
            (3, [0.0, 0.0, 5.0, 5.0]),
        ];
        let once = filter_instances(record(objs), 0.02, 3, 8).kept().unwrap();
        let twice = filter_instances(once.clone(), 0.02, 3, 8).kept().unwrap();
        assert_eq!(once.objects, twice.objects);
    }
}
