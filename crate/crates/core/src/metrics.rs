//! Segmentation metrics: Dice, IoU, mIoU and the Aggregated Jaccard Index.
//!
//! Binary maps are plain `&[bool]` slices in raster order. Two empty maps
//! score 1 under every metric.

use std::collections::BTreeMap;
use std::collections::VecDeque;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LabelMap;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("maps differ in size: {a} vs {b} pixels")));
    }
    Ok(())
}

fn counts(pred: &[bool], gt: &[bool]) -> (usize, usize, usize) {
    let mut inter = 0;
    let mut p = 0;
    let mut g = 0;
    for (&a, &b) in pred.iter().zip(gt) {
        inter += usize::from(a && b);
        p += usize::from(a);
        g += usize::from(b);
    }
    (inter, p, g)
}

/// `2|P∩G| / (|P|+|G|)`.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    let (i, p, g) = counts(pred, gt);
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * i as f64 / (p + g) as f64)
}

/// `|P∩G| / |P∪G|`.
pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    same_len(pred.len(), gt.len())?;
    let (i, p, g) = counts(pred, gt);
    let union = p + g - i;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(i as f64 / union as f64)
}

fn check_labels(pred: &LabelMap, gt: &LabelMap, k: usize) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::Dimension(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if let Some(&bad) = pred.data().iter().chain(gt.data()).find(|&&l| l as usize >= k) {
        return Err(Error::Range(format!("label {bad} outside [0, {k})")));
    }
    Ok(())
}

/// Per-class `(intersection, union)` pixel counts.
fn class_overlaps(pred: &LabelMap, gt: &LabelMap, k: usize) -> Vec<(usize, usize)> {
    let mut inter = vec![0usize; k];
    let mut p = vec![0usize; k];
    let mut g = vec![0usize; k];
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        p[a as usize] += 1;
        g[b as usize] += 1;
        if a == b {
            inter[a as usize] += 1;
        }
    }
    (0..k).map(|c| (inter[c], p[c] + g[c] - inter[c])).collect()
}

/// Mean IoU over the classes present in `pred` or `gt`.
pub fn miou(pred: &LabelMap, gt: &LabelMap, k: usize) -> Result<f64> {
    check_labels(pred, gt, k)?;
    let scores: Vec<f64> = class_overlaps(pred, gt, k)
        .into_iter()
        .filter(|&(_, u)| u > 0)
        .map(|(i, u)| i as f64 / u as f64)
        .collect();
    if scores.is_empty() {
        return Ok(1.0);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Dice per class, pooled over all pixels of all `(pred, gt)` pairs.
pub fn class_dice(pairs: &[(LabelMap, LabelMap)], k: usize) -> Result<Vec<f64>> {
    let mut inter = vec![0usize; k];
    let mut sizes = vec![0usize; k];
    for (pred, gt) in pairs {
        check_labels(pred, gt, k)?;
        for (&a, &b) in pred.data().iter().zip(gt.data()) {
            sizes[a as usize] += 1;
            sizes[b as usize] += 1;
            if a == b {
                inter[a as usize] += 1;
            }
        }
    }
    Ok((0..k)
        .map(|c| if sizes[c] == 0 { 1.0 } else { 2.0 * inter[c] as f64 / sizes[c] as f64 })
        .collect())
}

/// Mean of [`class_dice`] over the foreground classes `1..k`.
pub fn foreground_dice(pairs: &[(LabelMap, LabelMap)], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::Config("foreground Dice needs at least two classes".into()));
    }
    let d = class_dice(pairs, k)?;
    Ok(d[1..].iter().sum::<f64>() / (k - 1) as f64)
}

/// Mean IoU over all pixels of all pairs (per-class counts are pooled).
pub fn pooled_miou(pairs: &[(LabelMap, LabelMap)], k: usize) -> Result<f64> {
    let mut totals = vec![(0usize, 0usize); k];
    for (pred, gt) in pairs {
        check_labels(pred, gt, k)?;
        for (t, (i, u)) in totals.iter_mut().zip(class_overlaps(pred, gt, k)) {
            t.0 += i;
            t.1 += u;
        }
    }
    let scores: Vec<f64> = totals.iter().filter(|t| t.1 > 0).map(|&(i, u)| i as f64 / u as f64).collect();
    if scores.is_empty() {
        return Ok(1.0);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

/// Instance labelling: `0` is background, instances are numbered `1..=n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    height: usize,
    width: usize,
    ids: Vec<u32>,
    count: u32,
}

impl InstanceMap {
    /// Checks that ids are contiguous from 1.
    pub fn new(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::Dimension(format!("{} ids for a {height}x{width} map", ids.len())));
        }
        let count = ids.iter().copied().max().unwrap_or(0);
        let mut seen = vec![false; count as usize + 1];
        ids.iter().for_each(|&i| seen[i as usize] = true);
        if let Some(missing) = seen.iter().skip(1).position(|s| !s) {
            return Err(Error::Validation(format!("instance id {} is missing; ids must be contiguous", missing + 1)));
        }
        Ok(Self { height, width, ids, count })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn count(&self) -> u32 {
        self.count
    }

    /// Pixel count per id, index 0 being background.
    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0usize; self.count as usize + 1];
        self.ids.iter().for_each(|&i| a[i as usize] += 1);
        a
    }
}

/// Labels connected foreground regions; ids follow the raster order of each
/// region's first pixel.
pub fn connected_components(mask: &[bool], height: usize, width: usize, conn: Connectivity) -> Result<InstanceMap> {
    same_len(mask.len(), height * width)?;
    let mut ids = vec![0u32; mask.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || ids[start] != 0 {
            continue;
        }
        next += 1;
        ids[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = ((p / width) as isize, (p % width) as isize);
            for &(dy, dx) in conn.offsets() {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                    continue;
                }
                let q = ny as usize * width + nx as usize;
                if mask[q] && ids[q] == 0 {
                    ids[q] = next;
                    queue.push_back(q);
                }
            }
        }
    }
    InstanceMap::new(height, width, ids)
}

/// Instances of one semantic class.
pub fn instances_of(labels: &LabelMap, class: u32, conn: Connectivity) -> Result<InstanceMap> {
    connected_components(&labels.mask_of(class), labels.height(), labels.width(), conn)
}

/// Aggregated Jaccard Index. Each ground-truth instance is matched to the
/// predicted instance of highest IoU (ties to the smaller id); a ground-truth
/// instance overlapping nothing adds its area to the union only. Predicted
/// instances never chosen add their area to the union.
pub fn aji(pred: &InstanceMap, gt: &InstanceMap) -> Result<f64> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Dimension(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let np = pred.count as usize;
    let ng = gt.count as usize;
    let pa = pred.areas();
    let ga = gt.areas();
    // overlap[g][p] for g, p >= 1
    let mut overlap = vec![vec![0usize; np + 1]; ng + 1];
    for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
        if p != 0 && g != 0 {
            overlap[g as usize][p as usize] += 1;
        }
    }
    let mut inter_sum = 0usize;
    let mut union_sum = 0usize;
    let mut used = vec![false; np + 1];
    for g in 1..=ng {
        let mut best: Option<(usize, f64)> = None;
        for p in 1..=np {
            let i = overlap[g][p];
            if i == 0 {
                continue;
            }
            let score = i as f64 / (ga[g] + pa[p] - i) as f64;
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((p, score));
            }
        }
        match best {
            Some((p, _)) => {
                let i = overlap[g][p];
                inter_sum += i;
                union_sum += ga[g] + pa[p] - i;
                used[p] = true;
            }
            None => union_sum += ga[g],
        }
    }
    union_sum += (1..=np).filter(|&p| !used[p]).map(|p| pa[p]).sum::<usize>();
    if union_sum == 0 {
        return Ok(1.0);
    }
    Ok(inter_sum as f64 / union_sum as f64)
}

/// One line of a metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: u64,
    pub dataset: String,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row).map_err(|e| Error::format(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| Error::format(path, e))).collect()
}

/// Mean and sample standard deviation of one metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub run_id: String,
    pub dataset: String,
    pub split: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MetricSummary {
    /// `mean±std` in percent, two decimals.
    pub fn percent(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Groups rows by (run_id, dataset, split, metric) and aggregates over seeds.
pub fn summarize(rows: &[MetricRow]) -> Vec<MetricSummary> {
    let mut groups: BTreeMap<(String, String, String, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.run_id.clone(), r.dataset.clone(), r.split.clone(), r.metric.clone()))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((run_id, dataset, split, metric), v)| {
            let (mean, std) = mean_std(&v);
            MetricSummary {
                run_id,
                dataset,
                split,
                metric,
                mean,
                std,
                n: v.len(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(s: &str) -> Vec<bool> {
        s.chars().map(|c| c == '1').collect()
    }

    #[test]
    fn dice_and_iou_examples() {
        let p = bits("11110000");
        assert_eq!(dice(&p, &p).unwrap(), 1.0);
        assert_eq!(dice(&bits("1100"), &bits("0011")).unwrap(), 0.0);
        assert_eq!(dice(&bits("11110000"), &bits("00111100")).unwrap(), 0.5);
        assert_eq!(dice(&bits("0000"), &bits("0000")).unwrap(), 1.0);
        assert_eq!(iou(&bits("0000"), &bits("0000")).unwrap(), 1.0);
        assert_eq!(iou(&p, &p).unwrap(), 1.0);
        assert_eq!(iou(&bits("1100"), &bits("0011")).unwrap(), 0.0);
        // |P∩G| = 2, |P∪G| = 6
        assert!((iou(&bits("11110000"), &bits("00111100")).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert!(matches!(dice(&bits("1"), &bits("11")), Err(Error::Dimension(_))));
        assert!(iou(&bits("1"), &bits("11")).is_err());
    }

    #[test]
    fn miou_examples() {
        let a = LabelMap::new(2, 2, vec![0, 1, 2, 2]).unwrap();
        assert_eq!(miou(&a, &a, 3).unwrap(), 1.0);
        // class 0 perfect, class 1 predicted where gt has class 2
        let gt = LabelMap::new(1, 4, vec![0, 0, 2, 2]).unwrap();
        let pred = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        assert!((miou(&pred, &gt, 3).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let gt = LabelMap::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMap::new(1, 4, vec![0, 0, 0, 0]).unwrap();
        // class 0: 2/4, class 1: 0
        assert!((miou(&pred, &gt, 2).unwrap() - 0.25).abs() < 1e-15);
        let pred = LabelMap::new(1, 4, vec![0, 0, 5, 0]).unwrap();
        assert!(matches!(miou(&pred, &gt, 2), Err(Error::Range(_))));
    }

    #[test]
    fn components_and_connectivity() {
        let empty = connected_components(&[false; 9], 3, 3, Connectivity::Four).unwrap();
        assert_eq!(empty.count(), 0);
        let diag = bits("100010000");
        assert_eq!(connected_components(&diag, 3, 3, Connectivity::Four).unwrap().count(), 2);
        assert_eq!(connected_components(&diag, 3, 3, Connectivity::Eight).unwrap().count(), 1);
        // U shape: one component whose first pixel is top-left
        let u = connected_components(&bits("101101111"), 3, 3, Connectivity::Four).unwrap();
        assert_eq!(u.count(), 1);
        let two = connected_components(&bits("110001011"), 3, 3, Connectivity::Four).unwrap();
        assert_eq!(two.ids(), &[1, 1, 0, 0, 0, 2, 0, 2, 2]);
        assert!(InstanceMap::new(1, 3, vec![0, 2, 2]).is_err());
    }

    #[test]
    fn aji_examples() {
        let one = InstanceMap::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(aji(&one, &one).unwrap(), 1.0);
        let other = InstanceMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(aji(&other, &one).unwrap(), 0.0);
        let none = InstanceMap::new(2, 2, vec![0; 4]).unwrap();
        assert_eq!(aji(&none, &none).unwrap(), 1.0);
        assert_eq!(aji(&one, &none).unwrap(), 0.0);
        // gt {1,1,2,2}; pred one instance covering gt 1 plus a spurious one
        let gt = InstanceMap::new(1, 6, vec![1, 1, 0, 2, 2, 0]).unwrap();
        let pred = InstanceMap::new(1, 6, vec![1, 1, 1, 0, 0, 2]).unwrap();
        // gt1 -> pred1: I=2, U=3; gt2 unmatched: U+=2; pred2 unused: U+=1
        assert!((aji(&pred, &gt).unwrap() - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn summary_statistics() {
        let rows: Vec<MetricRow> = [0.8, 0.9, 1.0]
            .iter()
            .enumerate()
            .map(|(s, &v)| MetricRow {
                run_id: "r".into(),
                seed: s as u64,
                dataset: "synth".into(),
                split: "seg_test".into(),
                metric: "dice".into(),
                value: v,
            })
            .collect();
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert!((s[0].mean - 0.9).abs() < 1e-12);
        assert!((s[0].std - 0.1).abs() < 1e-12);
        assert_eq!(s[0].percent(), "90.00±10.00");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&path, &rows).unwrap();
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("run_id,seed,dataset,split,metric,value\n"));
    }

    #[test]
    fn pooled_dice_counts_every_pixel() {
        let a = LabelMap::new(1, 4, vec![0, 1, 1, 2]).unwrap();
        let b = LabelMap::new(1, 4, vec![0, 1, 2, 2]).unwrap();
        let d = class_dice(&[(a.clone(), b.clone()), (b.clone(), b.clone())], 3).unwrap();
        // class 1: sizes 2+1+1+1, inter 1+1
        assert!((d[1] - 4.0 / 5.0).abs() < 1e-15);
        assert!((foreground_dice(&[(b.clone(), b)], 3).unwrap() - 1.0).abs() < 1e-15);
        assert!(foreground_dice(&[(a.clone(), a)], 1).is_err());
    }
}
