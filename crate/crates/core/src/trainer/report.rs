//! Training-log summaries and loss-curve plots.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::train::IterRecord;
use crate::error::{Error, Result};

pub fn read_log(path: &Path) -> Result<Vec<IterRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogSummary {
    pub iterations: usize,
    pub epochs: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub min_loss: f64,
    pub final_l_seg: f64,
    pub final_l_pml: f64,
    pub mean_triplets: f64,
}

pub fn summarize(records: &[IterRecord]) -> Result<LogSummary> {
    let (first, last) = match (records.first(), records.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Data("training log is empty".into())),
    };
    Ok(LogSummary {
        iterations: records.len(),
        epochs: last.epoch + 1,
        first_loss: first.loss,
        final_loss: last.loss,
        min_loss: records.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min),
        final_l_seg: last.l_seg,
        final_l_pml: last.l_pml,
        mean_triplets: records.iter().map(|r| r.triplets as f64).sum::<f64>() / records.len() as f64,
    })
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut acc = 0.0;
    for i in 0..xs.len() {
        acc += xs[i];
        if i >= w {
            acc -= xs[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

type Series<'a> = (&'a str, [u8; 3], Vec<f64>);

fn series(records: &[IterRecord]) -> Vec<Series<'static>> {
    vec![
        ("loss", [31, 119, 180], records.iter().map(|r| r.loss).collect()),
        ("l_seg", [44, 160, 44], records.iter().map(|r| r.l_seg).collect()),
        ("l_pml", [214, 39, 40], records.iter().map(|r| r.l_pml).collect()),
    ]
}

fn bounds(all: &[Series]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, _, s) in all {
        for &v in s.iter().filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    (lo.min(0.0), hi)
}

fn svg(records: &[IterRecord]) -> String {
    let (w, h, m) = (800.0, 400.0, 40.0);
    let all = series(records);
    let (lo, hi) = bounds(&all);
    let n = records.len().max(2) as f64 - 1.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{m}\" y=\"{}\" font-size=\"12\">iteration 0..{}</text>\n\
         <text x=\"4\" y=\"{}\" font-size=\"12\">{hi:.3}</text>\n",
        h - m,
        w - m,
        h - m,
        h - m,
        h - 10.0,
        records.len().saturating_sub(1),
        m - 5.0
    );
    for (i, (name, c, vals)) in all.iter().enumerate() {
        let pts: Vec<String> = vals
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(j, v)| {
                let x = m + (w - 2.0 * m) * j as f64 / n;
                let y = h - m - (h - 2.0 * m) * (v - lo) / (hi - lo);
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let color = format!("rgb({},{},{})", c[0], c[1], c[2]);
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            pts.join(" "),
            w - m - 60.0,
            m + 15.0 * (i as f64 + 1.0)
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn raster(records: &[IterRecord]) -> RgbImage {
    let (w, h, m) = (800u32, 400u32, 30i64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let all = series(records);
    let (lo, hi) = bounds(&all);
    let n = records.len().max(2) as f64 - 1.0;
    let to_px = |j: usize, v: f64| {
        let x = m as f64 + (w as f64 - 2.0 * m as f64) * j as f64 / n;
        let y = h as f64 - m as f64 - (h as f64 - 2.0 * m as f64) * (v - lo) / (hi - lo);
        (x.round() as i64, y.round() as i64)
    };
    let put = |img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]| {
        if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    };
    for x in m..(w as i64 - m) {
        put(&mut img, x, h as i64 - m, [0, 0, 0]);
    }
    for y in m..(h as i64 - m) {
        put(&mut img, m, y, [0, 0, 0]);
    }
    for (_, c, vals) in &all {
        let pts: Vec<(i64, i64)> = vals
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(j, &v)| to_px(j, v))
            .collect();
        for seg in pts.windows(2) {
            let ((x0, y0), (x1, y1)) = (seg[0], seg[1]);
            let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
            for s in 0..=steps {
                let x = x0 + (x1 - x0) * s / steps;
                let y = y0 + (y1 - y0) * s / steps;
                put(&mut img, x, y, *c);
            }
        }
    }
    img
}

/// Writes an SVG when `path` ends in `.svg`, otherwise a PNG.
pub fn plot_log(records: &[IterRecord], path: &Path) -> Result<()> {
    let is_svg = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("svg"));
    if is_svg {
        fs::write(path, svg(records))?;
    } else {
        raster(records)
            .save(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}
