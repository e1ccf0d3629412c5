//! Run-length encoded mask manifests.
//!
//! Results: `frame track category score h w runs`.
//! Ground truth: `frame track category h w runs`.
//! `runs` is a comma-separated list of alternating background/foreground run
//! lengths over the row-major mask, starting with background. Lines starting
//! with `#` are comments.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::GroundTruth;
use crate::tensor::Tensor;

pub const GT_FILE: &str = "gt.txt";

pub fn encode(mask: &Tensor) -> String {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0usize;
    for &v in mask.data() {
        let fg = v > 0.5;
        if fg != current {
            runs.push(len);
            current = fg;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    runs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn decode(h: usize, w: usize, runs: &str) -> Result<Tensor> {
    let mut data = Vec::with_capacity(h * w);
    let mut fg = false;
    for r in runs.split(',') {
        let n: usize = r.trim().parse().map_err(|_| Error::Format(format!("bad run length `{r}`")))?;
        data.extend(std::iter::repeat_n(if fg { 1.0 } else { 0.0 }, n));
        fg = !fg;
    }
    if data.len() != h * w {
        return Err(Error::Format(format!("runs cover {} pixels, expected {}", data.len(), h * w)));
    }
    Tensor::from_vec(&[h, w], data)
}

/// One tracked instance in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub frame: usize,
    pub track_id: u64,
    pub category: usize,
    pub score: f64,
    pub mask: Tensor,
}

pub fn format_results(records: &[ResultRecord]) -> String {
    let mut s = String::from("# frame track category score h w runs\n");
    for r in records {
        let (h, w) = (r.mask.shape()[0], r.mask.shape()[1]);
        let _ = writeln!(s, "{} {} {} {} {h} {w} {}", r.frame, r.track_id, r.category, r.score, encode(&r.mask));
    }
    s
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i, l.split_whitespace().collect()))
}

fn field<T: std::str::FromStr>(line: usize, s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Format(format!("line {line}: invalid {what} `{s}`")))
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRecord>> {
    content_lines(text)
        .map(|(ln, f)| {
            if f.len() != 7 {
                return Err(Error::Format(format!("line {ln}: expected 7 fields, got {}", f.len())));
            }
            let (h, w) = (field(ln, f[4], "height")?, field(ln, f[5], "width")?);
            Ok(ResultRecord {
                frame: field(ln, f[0], "frame")?,
                track_id: field(ln, f[1], "track id")?,
                category: field(ln, f[2], "category")?,
                score: field(ln, f[3], "score")?,
                mask: decode(h, w, f[6]).map_err(|e| Error::Format(format!("line {ln}: {e}")))?,
            })
        })
        .collect()
}

pub fn format_ground_truth(frames: &[GroundTruth]) -> String {
    let mut s = String::from("# frames ");
    let _ = writeln!(s, "{}", frames.len());
    s.push_str("# frame track category h w runs\n");
    for (t, gt) in frames.iter().enumerate() {
        for ((m, c), id) in gt.masks.iter().zip(&gt.categories).zip(&gt.track_ids) {
            let _ = writeln!(s, "{t} {id} {c} {} {} {}", m.shape()[0], m.shape()[1], encode(m));
        }
    }
    s
}

/// Parses a ground-truth manifest. The frame count comes from a
/// `# frames N` header when present, so trailing empty frames survive.
pub fn parse_ground_truth(text: &str) -> Result<Vec<GroundTruth>> {
    let declared = text
        .lines()
        .find_map(|l| l.trim().strip_prefix("# frames "))
        .map(|n| n.trim().parse::<usize>().map_err(|_| Error::Format(format!("bad frame count `{n}`"))))
        .transpose()?;
    let mut frames: Vec<GroundTruth> = Vec::new();
    for (ln, f) in content_lines(text) {
        if f.len() != 6 {
            return Err(Error::Format(format!("line {ln}: expected 6 fields, got {}", f.len())));
        }
        let t: usize = field(ln, f[0], "frame")?;
        if frames.len() <= t {
            frames.resize(t + 1, GroundTruth { masks: vec![], categories: vec![], track_ids: vec![] });
        }
        let (h, w) = (field(ln, f[3], "height")?, field(ln, f[4], "width")?);
        let gt = &mut frames[t];
        gt.track_ids.push(field(ln, f[1], "track id")?);
        gt.categories.push(field(ln, f[2], "category")?);
        gt.masks.push(decode(h, w, f[5]).map_err(|e| Error::Format(format!("line {ln}: {e}")))?);
    }
    if let Some(n) = declared {
        if n < frames.len() {
            return Err(Error::Format(format!("manifest declares {n} frames but references frame {}", frames.len() - 1)));
        }
        frames.resize(n, GroundTruth { masks: vec![], categories: vec![], track_ids: vec![] });
    }
    Ok(frames)
}

pub fn write_ground_truth(path: &Path, frames: &[GroundTruth]) -> Result<()> {
    std::fs::write(path, format_ground_truth(frames))?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<Vec<GroundTruth>> {
    parse_ground_truth(&std::fs::read_to_string(path)?)
}
