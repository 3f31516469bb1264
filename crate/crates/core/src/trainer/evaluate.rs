//! Episodic evaluation under both protocols, and single-episode prediction
//! from files on disk.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::prepare;
use super::train::{fold_split, sample_pool};
use super::config::TrainConfig;
use crate::episodes::{read_mask, read_rgb, remap_labels, ClassId, Dataset, Episode, LabelMask};
use crate::error::{config_err, Error, Result};
use crate::metrics::{aggregate_runs, ConfusionState, Protocol, RunAggregate, Score};
use crate::network::Model;
use crate::tensor::Tensor;

/// Runs the model on prepared inputs and returns episode-local labels at
/// `out_hw`.
pub fn predict_labels(
    model: &Model,
    query: &Tensor,
    supports: &[Vec<(Tensor, LabelMask)>],
    out_hw: (usize, usize),
) -> Result<LabelMask> {
    let enc = model.encode_inputs(query, supports)?;
    Ok(model.predict_encoded(&enc, out_hw)?.labels())
}

/// Prediction and episode-local ground truth at the query's native size.
pub fn predict_episode(model: &Model, ds: &Dataset, ep: &Episode) -> Result<(LabelMask, LabelMask)> {
    let size = model.cfg.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let q = ds.sample(ep.query)?;
    let (query, _) = prepare(&q.image, &q.mask, size, None, &mut rng);
    let mut supports = Vec::with_capacity(ep.n_way());
    for (&class, shots) in ep.classes.iter().zip(&ep.support) {
        let mut v = Vec::with_capacity(shots.len());
        for &pos in shots {
            let s = ds.sample(pos)?;
            let (img, m) = prepare(&s.image, &s.mask, size, None, &mut rng);
            v.push((img, m.binary(class)));
        }
        supports.push(v);
    }
    let pred = predict_labels(model, &query, &supports, (q.mask.height, q.mask.width))?;
    Ok((pred, remap_labels(&q.mask, &ep.classes)))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolStates {
    pub miou: ConfusionState,
    pub miou_star: ConfusionState,
}

impl Default for ProtocolStates {
    fn default() -> Self {
        ProtocolStates {
            miou: ConfusionState::new(Protocol::Miou),
            miou_star: ConfusionState::new(Protocol::MiouStar),
        }
    }
}

/// Accumulates both protocols over `episodes`.
pub fn score_episodes(model: &Model, ds: &Dataset, episodes: &[Episode]) -> Result<ProtocolStates> {
    let mut st = ProtocolStates::default();
    for ep in episodes {
        let (pred, gt) = predict_episode(model, ds, ep)?;
        st.miou.accumulate(&pred, &gt, &ep.classes)?;
        st.miou_star.accumulate(&pred, &gt, &ep.classes)?;
    }
    Ok(st)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub miou: Score,
    pub miou_star: Score,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub fold_id: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub episodes: usize,
    pub test_classes: Vec<ClassId>,
    pub runs: Vec<RunReport>,
    pub miou: RunAggregate,
    pub miou_star: RunAggregate,
}

impl EvalReport {
    pub fn aggregate(&self, p: Protocol) -> RunAggregate {
        match p {
            Protocol::Miou => self.miou,
            Protocol::MiouStar => self.miou_star,
        }
    }

    /// Human-readable lines; `protocols` selects which aggregates are shown.
    pub fn render(&self, protocols: &[Protocol]) -> String {
        let mut s = format!(
            "{} fold {} {}-way {}-shot, {} episodes x {} runs\n",
            self.dataset,
            self.fold_id,
            self.n_way,
            self.k_shot,
            self.episodes,
            self.runs.len()
        );
        for r in &self.runs {
            for &p in protocols {
                let sc = if p == Protocol::Miou { &r.miou } else { &r.miou_star };
                let per: Vec<String> = sc.per_class.iter().map(|(c, v)| format!("{c}:{v:.4}")).collect();
                s.push_str(&format!(
                    "  seed {} {p}: {:.4} [{}]\n",
                    r.seed,
                    sc.mean,
                    per.join(" ")
                ));
            }
        }
        for &p in protocols {
            s.push_str(&format!("{p}: {}\n", self.aggregate(p)));
        }
        s
    }
}

/// Streams `episodes` test-split episodes per run, one run per seed
/// `cfg.eval.seed + r`. Parameters are only read.
pub fn evaluate(cfg: &TrainConfig, model: &Model, ds: &Dataset, episodes: usize, runs: usize) -> Result<EvalReport> {
    if model.cfg.n_way != cfg.n_way {
        return Err(Error::Load(format!(
            "model is {}-way, config asks for {}-way",
            model.cfg.n_way, cfg.n_way
        )));
    }
    if runs == 0 || episodes == 0 {
        return Err(config_err!("evaluation needs at least one run and one episode"));
    }
    let split = fold_split(ds, cfg.fold_id, cfg.dataset.num_folds)?;
    let mut reports = Vec::with_capacity(runs);
    for r in 0..runs {
        let seed = cfg.eval.seed + r as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = sample_pool(ds, &split.test_classes, cfg, episodes, &mut rng)?;
        let st = score_episodes(model, ds, &eps)?;
        reports.push(RunReport {
            seed,
            miou: st.miou.score()?,
            miou_star: st.miou_star.score()?,
        });
    }
    let miou = aggregate_runs(&reports.iter().map(|r| r.miou.mean).collect::<Vec<_>>())?;
    let miou_star = aggregate_runs(&reports.iter().map(|r| r.miou_star.mean).collect::<Vec<_>>())?;
    Ok(EvalReport {
        dataset: ds.index.name.clone(),
        fold_id: cfg.fold_id,
        n_way: cfg.n_way,
        k_shot: cfg.k_shot,
        episodes,
        test_classes: split.test_classes,
        runs: reports,
        miou,
        miou_star,
    })
}

/// Support set on disk: one subdirectory per class (sorted by name), each
/// holding `<stem>.png` images and `<stem>_mask.png` masks (nonzero = class).
pub fn read_support_dir(dir: &Path) -> Result<Vec<(String, Vec<(PathBuf, PathBuf)>)>> {
    let mut classes: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    let mut out = Vec::new();
    for cdir in classes {
        let mut files: Vec<PathBuf> = fs::read_dir(&cdir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut shots = Vec::new();
        for f in &files {
            let Some(stem) = f.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            if stem.ends_with("_mask") {
                continue;
            }
            let mask = f.with_file_name(format!("{stem}_mask.png"));
            if !mask.is_file() {
                return Err(Error::Data(format!("support image {} has no mask {}", f.display(), mask.display())));
            }
            shots.push((f.clone(), mask));
        }
        if shots.is_empty() {
            return Err(Error::Data(format!("support class directory {} is empty", cdir.display())));
        }
        let name = cdir.file_name().unwrap().to_string_lossy().into_owned();
        out.push((name, shots));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no class directories in {}", dir.display())));
    }
    Ok(out)
}

pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

pub fn overlay(image: &Tensor, mask: &LabelMask) -> RgbImage {
    let (h, w, _) = image.dims3();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let l = mask.labels[y * w + x] as usize;
        let px: [u8; 3] = std::array::from_fn(|c| {
            let v = image.at3(y, x, c) * 255.0;
            if l == 0 {
                v.round() as u8
            } else {
                (0.5 * v + 0.5 * PALETTE[l % PALETTE.len()][c] as f64).round() as u8
            }
        });
        Rgb(px)
    })
}

pub fn write_label_png(mask: &LabelMask, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([mask.labels[y as usize * mask.width + x as usize]])
    });
    img.save(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Predicts the query's episode-local mask at its native size and writes it
/// (plus an optional colour overlay). Class order is the sorted support
/// subdirectory order.
pub fn predict_files(
    model: &Model,
    support_dir: &Path,
    query_path: &Path,
    out: &Path,
    overlay_path: Option<&Path>,
) -> Result<LabelMask> {
    let classes = read_support_dir(support_dir)?;
    if classes.len() != model.cfg.n_way {
        return Err(config_err!(
            "support has {} classes, checkpoint is {}-way",
            classes.len(),
            model.cfg.n_way
        ));
    }
    let size = model.cfg.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let q = read_rgb(query_path)?;
    let (h, w, _) = q.dims3();
    let (query, _) = prepare(&q, &LabelMask::filled(h, w, 0), size, None, &mut rng);
    let mut supports = Vec::with_capacity(classes.len());
    for (_, shots) in &classes {
        let mut v = Vec::with_capacity(shots.len());
        for (img_path, mask_path) in shots {
            let img = read_rgb(img_path)?;
            let m = read_mask(mask_path)?;
            if (m.height, m.width) != (img.shape()[0], img.shape()[1]) {
                return Err(Error::Data(format!(
                    "{} and its mask differ in size",
                    img_path.display()
                )));
            }
            let m = LabelMask::new(m.height, m.width, m.labels.iter().map(|&l| u8::from(l != 0)).collect());
            let (ti, tm) = prepare(&img, &m, size, None, &mut rng);
            v.push((ti, tm));
        }
        supports.push(v);
    }
    let pred = predict_labels(model, &query, &supports, (h, w))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_label_png(&pred, out)?;
    if let Some(p) = overlay_path {
        overlay(&q, &pred)
            .save(p)
            .map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
    }
    Ok(pred)
}
