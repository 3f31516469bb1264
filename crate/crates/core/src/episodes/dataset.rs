use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};

use super::{ClassId, LabelMask, ShapeParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One image with its dataset-level label mask. Pixel values are in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub mask: LabelMask,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub name: String,
    pub image_path: Option<PathBuf>,
    pub mask_path: Option<PathBuf>,
    /// Foreground classes present in the mask, ascending.
    pub classes: Vec<ClassId>,
}

#[derive(Clone, Debug, Default)]
pub struct DatasetIndex {
    pub name: String,
    pub class_names: BTreeMap<ClassId, String>,
    pub entries: Vec<IndexEntry>,
    /// For every class, ascending entry positions whose mask contains it.
    pub per_class: BTreeMap<ClassId, Vec<usize>>,
    by_name: HashMap<String, usize>,
}

impl DatasetIndex {
    pub fn new(name: &str, class_names: BTreeMap<ClassId, String>, entries: Vec<IndexEntry>) -> Self {
        let mut per_class: BTreeMap<ClassId, Vec<usize>> =
            class_names.keys().map(|&c| (c, Vec::new())).collect();
        let mut by_name = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            for c in &e.classes {
                per_class.entry(*c).or_default().push(i);
            }
            by_name.insert(e.name.clone(), i);
        }
        DatasetIndex {
            name: name.to_string(),
            class_names,
            entries,
            per_class,
            by_name,
        }
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.class_names.keys().copied().collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn images_with(&self, class: ClassId) -> &[usize] {
        self.per_class.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }
}

enum Storage {
    Memory(Vec<Sample>),
    Disk,
}

/// A dataset index together with access to the pixels it describes.
pub struct Dataset {
    pub index: DatasetIndex,
    /// Generator parameters for synthetic datasets, one list per entry.
    pub shapes: Option<Vec<Vec<ShapeParams>>>,
    /// Explicit per-fold test classes read from `fold<k>.txt`.
    pub fold_lists: BTreeMap<usize, Vec<ClassId>>,
    storage: Storage,
}

impl Dataset {
    pub fn in_memory(index: DatasetIndex, samples: Vec<Sample>, shapes: Option<Vec<Vec<ShapeParams>>>) -> Self {
        assert_eq!(index.entries.len(), samples.len());
        Dataset {
            index,
            shapes,
            fold_lists: BTreeMap::new(),
            storage: Storage::Memory(samples),
        }
    }

    pub fn len(&self) -> usize {
        self.index.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.entries.is_empty()
    }

    pub fn sample(&self, pos: usize) -> Result<Sample> {
        match &self.storage {
            Storage::Memory(samples) => samples
                .get(pos)
                .cloned()
                .ok_or_else(|| Error::Data(format!("no sample at position {pos}"))),
            Storage::Disk => {
                let e = self
                    .index
                    .entries
                    .get(pos)
                    .ok_or_else(|| Error::Data(format!("no sample at position {pos}")))?;
                let image = read_rgb(e.image_path.as_ref().expect("disk entry has an image path"))?;
                let mask = read_mask(e.mask_path.as_ref().expect("disk entry has a mask path"))?;
                if (mask.height, mask.width) != (image.shape()[0], image.shape()[1]) {
                    return Err(Error::Data(format!("image and mask sizes differ for {}", e.name)));
                }
                Ok(Sample { image, mask })
            }
        }
    }
}

pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
    Tensor::from_vec(&[h as usize, w as usize, 3], data)
}

pub fn tensor_to_rgb(t: &Tensor) -> RgbImage {
    let (h, w, _) = t.dims3();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = t.pixel(y as usize, x as usize);
        Rgb([0, 1, 2].map(|c| (px[c].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(LabelMask::new(h as usize, w as usize, img.into_raw()))
}

pub fn write_mask(mask: &LabelMask, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([mask.labels[y as usize * mask.width + x as usize]])
    });
    img.save(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn parse_classes(text: &str) -> Result<BTreeMap<ClassId, String>> {
    let mut out = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, name) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let id: ClassId = id
            .parse()
            .map_err(|_| Error::Data(format!("classes.txt line {}: bad id {id:?}", ln + 1)))?;
        if id == 0 {
            return Err(Error::Data("class id 0 is reserved for background".into()));
        }
        out.insert(id, name.trim().to_string());
    }
    Ok(out)
}

/// Opens a dataset laid out as `images/`, `masks/`, `classes.txt` and
/// optional `fold<k>.txt` / `shapes.jsonl`.
pub fn load_folder(root: &Path) -> Result<Dataset> {
    let classes_txt = fs::read_to_string(root.join("classes.txt"))
        .map_err(|e| Error::Data(format!("{}: {e}", root.join("classes.txt").display())))?;
    let class_names = parse_classes(&classes_txt)?;

    let mut image_files: Vec<PathBuf> = fs::read_dir(root.join("images"))
        .map_err(|e| Error::Data(format!("{}: {e}", root.join("images").display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    image_files.sort();

    let mut entries = Vec::with_capacity(image_files.len());
    for path in image_files {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("bad file name {}", path.display())))?
            .to_string();
        let mask_path = root.join("masks").join(format!("{stem}.png"));
        let mask = read_mask(&mask_path)?;
        let classes = mask
            .distinct()
            .into_iter()
            .filter(|&c| c != 0 && class_names.contains_key(&c))
            .collect();
        entries.push(IndexEntry {
            name: stem,
            image_path: Some(path),
            mask_path: Some(mask_path),
            classes,
        });
    }
    let name = root
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    let index = DatasetIndex::new(&name, class_names, entries);

    let mut fold_lists = BTreeMap::new();
    for k in 0.. {
        let p = root.join(format!("fold{k}.txt"));
        let Ok(text) = fs::read_to_string(&p) else { break };
        let ids = text
            .split_whitespace()
            .map(|t| t.parse::<ClassId>().map_err(|_| Error::Data(format!("{}: bad class id {t:?}", p.display()))))
            .collect::<Result<Vec<_>>>()?;
        fold_lists.insert(k, ids);
    }

    let shapes_path = root.join("shapes.jsonl");
    let shapes = if shapes_path.exists() {
        let text = fs::read_to_string(&shapes_path)?;
        let mut by_name: HashMap<String, Vec<ShapeParams>> = HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let rec: ShapeRecord = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("shapes.jsonl: {e}")))?;
            by_name.insert(rec.name, rec.shapes);
        }
        Some(
            index
                .entries
                .iter()
                .map(|e| by_name.remove(&e.name).unwrap_or_default())
                .collect(),
        )
    } else {
        None
    };

    Ok(Dataset {
        index,
        shapes,
        fold_lists,
        storage: Storage::Disk,
    })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ShapeRecord {
    name: String,
    shapes: Vec<ShapeParams>,
}

/// Writes any dataset to the on-disk layout understood by [`load_folder`].
pub fn write_folder(ds: &Dataset, root: &Path, num_folds: usize) -> Result<()> {
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("masks"))?;
    let mut classes = fs::File::create(root.join("classes.txt"))?;
    for (id, name) in &ds.index.class_names {
        writeln!(classes, "{id} {name}")?;
    }
    for (pos, e) in ds.index.entries.iter().enumerate() {
        let s = ds.sample(pos)?;
        let p = root.join("images").join(format!("{}.png", e.name));
        tensor_to_rgb(&s.image)
            .save(&p)
            .map_err(|err| Error::Data(format!("{}: {err}", p.display())))?;
        write_mask(&s.mask, &root.join("masks").join(format!("{}.png", e.name)))?;
    }
    let ids = ds.index.class_ids();
    if num_folds > 0 && ids.len().is_multiple_of(num_folds) {
        for k in 0..num_folds {
            let fold = super::build_fold_split(&ds.index.name, &ids, k, num_folds)?;
            let text: Vec<String> = fold.test_classes.iter().map(|c| c.to_string()).collect();
            fs::write(root.join(format!("fold{k}.txt")), text.join("\n") + "\n")?;
        }
    }
    if let Some(shapes) = &ds.shapes {
        let mut f = fs::File::create(root.join("shapes.jsonl"))?;
        for (e, s) in ds.index.entries.iter().zip(shapes) {
            let rec = ShapeRecord {
                name: e.name.clone(),
                shapes: s.clone(),
            };
            writeln!(f, "{}", serde_json::to_string(&rec).expect("serializable"))?;
        }
    }
    Ok(())
}
