use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{
    ImageVideo, PairedSample, Point, PointCloudVideo, SceneSpec, ACTION_CLASS_NAMES,
    SHAPE_CLASS_NAMES,
};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const POINTS_FILE: &str = "points.bin";
const IMAGES_FILE: &str = "images.bin";
const LABELS_FILE: &str = "labels.bin";
const POINT_LABELS_FILE: &str = "point_labels.bin";
const META_FILE: &str = "meta.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::validation("split", format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    #[serde(default)]
    pub pretrain: Vec<String>,
    #[serde(default)]
    pub train: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Pretrain => &self.pretrain,
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub dir: String,
    pub frame_count: usize,
    pub point_count: usize,
    /// `[H, W]`.
    pub image_size: [usize; 2],
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub point_class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub splits: Splits,
    pub sequences: Vec<SequenceEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SequenceMeta {
    sequence_id: String,
    #[serde(default)]
    spec: Option<SceneSpec>,
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn atomic_write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write(path, bytes)
}

fn f32_bytes(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(f32::to_le_bytes).collect()
}

fn i32_bytes(values: impl Iterator<Item = i32>) -> Vec<u8> {
    values.flat_map(i32::to_le_bytes).collect()
}

/// Writes one sequence into `dir` (created if missing). Every file is written
/// to a temporary sibling and renamed into place.
pub fn write_sequence(sample: &PairedSample, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pts = sample
        .points
        .frames()
        .iter()
        .flat_map(|f| f.iter().flat_map(|p| p.iter().copied()));
    atomic_write(&dir.join(POINTS_FILE), &f32_bytes(pts))?;
    let imgs = sample.images.frames().iter().flat_map(|f| f.iter().copied());
    atomic_write(&dir.join(IMAGES_FILE), &f32_bytes(imgs))?;
    if let Some(labels) = &sample.labels {
        atomic_write(&dir.join(LABELS_FILE), &i32_bytes(labels.iter().copied()))?;
    }
    if let Some(pl) = &sample.point_labels {
        let it = pl.iter().flat_map(|f| f.iter().copied());
        atomic_write(&dir.join(POINT_LABELS_FILE), &i32_bytes(it))?;
    }
    let meta = SequenceMeta {
        sequence_id: sample.sequence_id().to_string(),
        spec: sample.spec,
    };
    let json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    atomic_write(&dir.join(META_FILE), &json)
}

fn entry_for(sample: &PairedSample, dir: String) -> SequenceEntry {
    SequenceEntry {
        dir,
        frame_count: sample.frame_count(),
        point_count: sample.points.points_per_frame(),
        image_size: [sample.images.height(), sample.images.width()],
        class_names: ACTION_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        point_class_names: if sample.point_labels.is_some() {
            SHAPE_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            Vec::new()
        },
    }
}

/// Writes every sample under `root/<sequence_id>` plus the manifest. A sample
/// listed in several splits is stored once.
pub fn write_dataset(root: &Path, splits: &[(Split, &[PairedSample])]) -> Result<Manifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = Manifest {
        version: MANIFEST_VERSION,
        splits: Splits::default(),
        sequences: Vec::new(),
    };
    let mut written = BTreeMap::new();
    for (split, samples) in splits {
        for sample in samples.iter() {
            let dir = sample.sequence_id().to_string();
            if !written.contains_key(&dir) {
                write_sequence(sample, &root.join(&dir))?;
                manifest.sequences.push(entry_for(sample, dir.clone()));
                written.insert(dir.clone(), ());
            }
            match split {
                Split::Pretrain => manifest.splits.pretrain.push(dir),
                Split::Train => manifest.splits.train.push(dir),
                Split::Test => manifest.splits.test.push(dir),
            }
        }
    }
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    atomic_write(&root.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(&path, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version {
            path,
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }
    Ok(manifest)
}

fn read_words(path: &Path, expected: usize) -> Result<Vec<[u8; 4]>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::corrupt(
            path,
            format!("{} bytes, expected {}", bytes.len(), expected * 4),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect())
}

fn load_sequence(root: &Path, entry: &SequenceEntry, need_labels: bool) -> Result<PairedSample> {
    let dir = root.join(&entry.dir);
    let (l, n) = (entry.frame_count, entry.point_count);
    let [h, w] = entry.image_size;

    let meta_path = dir.join(META_FILE);
    let meta_bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SequenceMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::corrupt(&meta_path, e.to_string()))?;

    let pts_path = dir.join(POINTS_FILE);
    let words = read_words(&pts_path, l * n * 3)?;
    let coords: Vec<f32> = words.into_iter().map(f32::from_le_bytes).collect();
    let frames: Vec<Vec<Point>> = coords
        .chunks_exact(n * 3)
        .map(|f| f.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect())
        .collect();
    let points = PointCloudVideo::new(meta.sequence_id.clone(), frames)
        .map_err(|e| Error::corrupt(&pts_path, e.to_string()))?;

    // Derive the image frame count from the file so a modality mismatch is
    // reported as such rather than as a bad byte count.
    let img_path = dir.join(IMAGES_FILE);
    let img_len = fs::metadata(&img_path)
        .map_err(|e| Error::io(&img_path, e))?
        .len() as usize;
    let per_frame = h * w * 3 * 4;
    if per_frame == 0 || img_len % per_frame != 0 {
        return Err(Error::corrupt(&img_path, format!("{img_len} bytes is not a whole number of {h}x{w} frames")));
    }
    let img_frames = img_len / per_frame;
    if img_frames != l {
        return Err(Error::corrupt(
            &dir,
            format!("frame-count mismatch: {l} point frames but {img_frames} image frames"),
        ));
    }
    let words = read_words(&img_path, l * h * w * 3)?;
    let values: Vec<f32> = words.into_iter().map(f32::from_le_bytes).collect();
    let images = ImageVideo::new(
        meta.sequence_id.clone(),
        h,
        w,
        values.chunks_exact(h * w * 3).map(<[f32]>::to_vec).collect(),
    )
    .map_err(|e| Error::corrupt(&img_path, e.to_string()))?;

    let lab_path = dir.join(LABELS_FILE);
    let labels = if lab_path.exists() {
        let words = read_words(&lab_path, l)?;
        Some(words.into_iter().map(i32::from_le_bytes).collect())
    } else if need_labels {
        return Err(Error::io(
            &lab_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "labels required for this split"),
        ));
    } else {
        None
    };

    let pl_path = dir.join(POINT_LABELS_FILE);
    let point_labels = if pl_path.exists() {
        let words = read_words(&pl_path, l * n)?;
        let flat: Vec<i32> = words.into_iter().map(i32::from_le_bytes).collect();
        Some(flat.chunks_exact(n).map(<[i32]>::to_vec).collect())
    } else {
        None
    };

    let mut sample = PairedSample::new(points, images, labels, point_labels)
        .map_err(|e| Error::corrupt(&dir, e.to_string()))?;
    sample.spec = meta.spec;
    Ok(sample)
}

/// Loads the samples of one split, in manifest order.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<PairedSample>> {
    let manifest = read_manifest(root)?;
    let entries: BTreeMap<&str, &SequenceEntry> = manifest
        .sequences
        .iter()
        .map(|e| (e.dir.as_str(), e))
        .collect();
    let need_labels = split != Split::Pretrain;
    manifest
        .splits
        .get(split)
        .iter()
        .map(|dir| {
            let entry = entries.get(dir.as_str()).ok_or_else(|| {
                Error::corrupt(
                    root.join(MANIFEST_FILE),
                    format!("split references unknown sequence {dir:?}"),
                )
            })?;
            load_sequence(root, entry, need_labels)
        })
        .collect()
}

/// Resolves a dataset root path for error messages.
#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{synth_scene, SceneSpec};

    fn sample(seed: u64) -> PairedSample {
        synth_scene(&SceneSpec {
            motion_class: (seed % 3) as u32,
            num_objects: 2,
            frame_count: 4,
            points_per_frame: 16,
            image_size: (8, 10),
            rng_seed: seed,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample(3);
        write_dataset(dir.path(), &[(Split::Train, std::slice::from_ref(&s))]).unwrap();
        let back = load_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0], s);
    }

    #[test]
    fn empty_split_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[(Split::Train, &[sample(1)][..])]).unwrap();
        assert!(load_dataset(dir.path(), Split::Test).unwrap().is_empty());
    }

    #[test]
    fn missing_manifest_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path(), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("manifest.json"));
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample(2);
        write_dataset(dir.path(), &[(Split::Test, std::slice::from_ref(&s))]).unwrap();
        fs::remove_file(dir.path().join(s.sequence_id()).join(POINTS_FILE)).unwrap();
        let err = load_dataset(dir.path(), Split::Test).unwrap_err();
        assert!(err.to_string().contains("points.bin"), "{err}");
    }

    #[test]
    fn truncated_frame_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample(4);
        write_dataset(dir.path(), &[(Split::Train, std::slice::from_ref(&s))]).unwrap();
        let p = dir.path().join(s.sequence_id()).join(POINTS_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_dataset(dir.path(), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Corrupt { .. }), "{err}");
    }

    #[test]
    fn modality_frame_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample(5);
        write_dataset(dir.path(), &[(Split::Train, std::slice::from_ref(&s))]).unwrap();
        let p = dir.path().join(s.sequence_id()).join(IMAGES_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 4 * 3]).unwrap();
        let err = load_dataset(dir.path(), Split::Train).unwrap_err();
        assert!(err.to_string().contains("frame-count mismatch"), "{err}");
    }

    #[test]
    fn labels_required_outside_pretrain() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = sample(6);
        s.labels = None;
        write_dataset(dir.path(), &[(Split::Pretrain, std::slice::from_ref(&s)), (Split::Test, std::slice::from_ref(&s))]).unwrap();
        assert_eq!(load_dataset(dir.path(), Split::Pretrain).unwrap().len(), 1);
        assert!(load_dataset(dir.path(), Split::Test).is_err());
    }

    #[test]
    fn unwritable_location_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = write_sequence(&sample(1), &blocker.join("seq")).unwrap_err();
        match err {
            Error::Io { path, .. } => assert!(path.starts_with(&blocker)),
            other => panic!("unexpected {other}"),
        }
    }
}
