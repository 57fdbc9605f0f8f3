//! Overlap, surface-distance and uncertainty-error metrics for binary masks.
//!
//! Conventions: two empty masks have Dice = IoU = 1; ASSD is undefined
//! (`f64::INFINITY`) when either surface is empty, and undefined values are
//! left out of aggregate means.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Thresholds swept by [`ueo_max`]: 0.05, 0.10, ..., 0.95.
pub fn ueo_thresholds() -> impl Iterator<Item = f64> {
    (1..=19).map(|i| i as f64 * 0.05)
}

pub const UEO_FIXED_TAU: f64 = 0.5;

/// Per-pixel class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Self {
        assert_eq!(labels.len(), height * width);
        LabelMap {
            height,
            width,
            labels,
        }
    }

    /// Labels from a one-hot C x H x W tensor.
    pub fn from_onehot(t: &Tensor) -> Self {
        crate::evidential::argmax_channels(t)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Pixels with a nonzero label.
    pub fn foreground(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            cells: self.labels.iter().map(|&l| l != 0).collect(),
        }
    }

    /// Pixels where the two label maps disagree.
    pub fn disagreement(&self, other: &LabelMap) -> Result<BinaryMask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dim("disagreement", "label maps differ in shape"));
        }
        Ok(BinaryMask {
            height: self.height,
            width: self.width,
            cells: self
                .labels
                .iter()
                .zip(&other.labels)
                .map(|(a, b)| a != b)
                .collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Self {
        assert_eq!(cells.len(), height * width);
        BinaryMask {
            height,
            width,
            cells,
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let cells = (0..height * width)
            .map(|i| f(i / width, i % width))
            .collect();
        BinaryMask::new(height, width, cells)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.width + c]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    pub fn transposed(&self) -> BinaryMask {
        BinaryMask::from_fn(self.width, self.height, |r, c| self.get(c, r))
    }

    fn check_same(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::dim(
                op,
                format!(
                    "{}x{} vs {}x{}",
                    self.height, self.width, other.height, other.width
                ),
            ));
        }
        Ok(())
    }

    fn overlap(&self, other: &BinaryMask) -> usize {
        self.cells
            .iter()
            .zip(&other.cells)
            .filter(|(a, b)| **a && **b)
            .count()
    }
}

/// Boundary pixel coordinates (row, col).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SurfaceSet {
    pub points: Vec<(usize, usize)>,
}

pub fn dice(r: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    r.check_same(g, "dice")?;
    let denom = r.count() + g.count();
    if denom == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * r.overlap(g) as f64 / denom as f64)
}

pub fn iou(r: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    r.check_same(g, "iou")?;
    let inter = r.overlap(g);
    let union = r.count() + g.count() - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Foreground pixels with a background 4-neighbour or lying on the image
/// border, in row-major order.
pub fn extract_surface(mask: &BinaryMask) -> SurfaceSet {
    let (h, w) = (mask.height, mask.width);
    let mut points = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                points.push((r, c));
            }
        }
    }
    SurfaceSet { points }
}

/// Points bucketed by row for pruned nearest-neighbour search.
struct RowIndex {
    rows: Vec<Vec<usize>>,
}

impl RowIndex {
    fn new(points: &[(usize, usize)], height: usize) -> Self {
        let mut rows = vec![Vec::new(); height];
        for &(r, c) in points {
            rows[r].push(c);
        }
        RowIndex { rows }
    }

    /// Smallest squared distance from (r, c) to any indexed point. Rows are
    /// scanned outward from `r` and the scan stops once the row gap alone
    /// exceeds the best distance found.
    fn nearest_sq(&self, r: usize, c: usize) -> u64 {
        let mut best = u64::MAX;
        let h = self.rows.len();
        for gap in 0..h {
            let gap_sq = (gap * gap) as u64;
            if gap_sq > best {
                break;
            }
            let mut visit = |row: usize| {
                for &pc in &self.rows[row] {
                    let dc = pc.abs_diff(c) as u64;
                    best = best.min(gap_sq + dc * dc);
                }
            };
            if r >= gap {
                visit(r - gap);
            }
            if gap > 0 && r + gap < h {
                visit(r + gap);
            }
        }
        best
    }
}

/// Average symmetric surface distance in pixel units, normalised by
/// `|S_R| + |S_G|`. Returns `f64::INFINITY` when either surface is empty.
pub fn assd(r: &BinaryMask, g: &BinaryMask) -> Result<f64> {
    r.check_same(g, "assd")?;
    let sr = extract_surface(r);
    let sg = extract_surface(g);
    if sr.points.is_empty() || sg.points.is_empty() {
        return Ok(f64::INFINITY);
    }
    let ir = RowIndex::new(&sr.points, r.height);
    let ig = RowIndex::new(&sg.points, g.height);
    let mut total = 0.0;
    for &(pr, pc) in &sr.points {
        total += (ig.nearest_sq(pr, pc) as f64).sqrt();
    }
    for &(pr, pc) in &sg.points {
        total += (ir.nearest_sq(pr, pc) as f64).sqrt();
    }
    Ok(total / (sr.points.len() + sg.points.len()) as f64)
}

/// `{u >= tau}` over a 1 x H x W (or H x W) uncertainty map.
pub fn binarize(umap: &Tensor, tau: f64, height: usize, width: usize) -> Result<BinaryMask> {
    if umap.len() != height * width {
        return Err(Error::dim(
            "ueo",
            format!("map {:?} vs {height}x{width}", umap.shape()),
        ));
    }
    Ok(BinaryMask::new(
        height,
        width,
        umap.data().iter().map(|&u| u >= tau).collect(),
    ))
}

/// Dice overlap between the error region and `{u >= tau}`.
pub fn ueo(err: &BinaryMask, umap: &Tensor, tau: f64) -> Result<f64> {
    let u = binarize(umap, tau, err.height, err.width)?;
    dice(err, &u)
}

/// Maximum of [`ueo`] over [`ueo_thresholds`].
pub fn ueo_max(err: &BinaryMask, umap: &Tensor) -> Result<f64> {
    let mut best = 0.0f64;
    for tau in ueo_thresholds() {
        best = best.max(ueo(err, umap, tau)?);
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub image_id: String,
    pub dice: f64,
    pub iou: f64,
    /// `INFINITY` when undefined.
    pub assd: f64,
    pub ueo: f64,
    pub ueo_max: f64,
    /// Mean of the final uncertainty map; not part of the CSV contract.
    pub mean_uncertainty: f64,
}

impl MetricRow {
    pub fn compute(
        image_id: &str,
        pred: &LabelMap,
        truth: &LabelMap,
        umap: &Tensor,
    ) -> Result<MetricRow> {
        let r = pred.foreground();
        let g = truth.foreground();
        let err = pred.disagreement(truth)?;
        Ok(MetricRow {
            image_id: image_id.to_string(),
            dice: dice(&r, &g)?,
            iou: iou(&r, &g)?,
            assd: assd(&r, &g)?,
            ueo: ueo(&err, umap, UEO_FIXED_TAU)?,
            ueo_max: ueo_max(&err, umap)?,
            mean_uncertainty: umap.mean(),
        })
    }
}

/// Per-image rows plus their aggregate.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

pub const CSV_HEADER: &str = "image_id,dice,iou,assd,ueo@0.5,ueo_max";

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values.filter(|v| v.is_finite()) {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::INFINITY
    } else {
        s / n as f64
    }
}

impl MetricReport {
    pub fn new(rows: Vec<MetricRow>) -> Self {
        MetricReport { rows }
    }

    pub fn mean_dice(&self) -> f64 {
        mean_of(self.rows.iter().map(|r| r.dice))
    }

    pub fn mean_iou(&self) -> f64 {
        mean_of(self.rows.iter().map(|r| r.iou))
    }

    /// Mean over images with a defined ASSD.
    pub fn mean_assd(&self) -> f64 {
        mean_of(self.rows.iter().map(|r| r.assd))
    }

    pub fn mean_ueo(&self) -> f64 {
        mean_of(self.rows.iter().map(|r| r.ueo))
    }

    pub fn mean_ueo_max(&self) -> f64 {
        mean_of(self.rows.iter().map(|r| r.ueo_max))
    }

    pub fn mean_uncertainty(&self) -> f64 {
        mean_of(self.rows.iter().map(|r| r.mean_uncertainty))
    }

    /// Header, one row per image, then a `mean` row.
    pub fn to_csv(&self) -> String {
        fn num(v: f64) -> String {
            if v.is_finite() {
                format!("{v:.6}")
            } else {
                "undefined".to_string()
            }
        }
        let mut out = String::new();
        writeln!(out, "{CSV_HEADER}").unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.image_id,
                num(r.dice),
                num(r.iou),
                num(r.assd),
                num(r.ueo),
                num(r.ueo_max)
            )
            .unwrap();
        }
        writeln!(
            out,
            "mean,{},{},{},{},{}",
            num(self.mean_dice()),
            num(self.mean_iou()),
            num(self.mean_assd()),
            num(self.mean_ueo()),
            num(self.mean_ueo_max())
        )
        .unwrap();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, c| on.contains(&(r, c)))
    }

    #[test]
    fn dice_iou_hand_counts() {
        let r = mask(2, 2, &[(0, 0), (0, 1)]);
        let g = mask(2, 2, &[(0, 1), (1, 1)]);
        assert_eq!(dice(&r, &g).unwrap(), 0.5);
        assert!((iou(&r, &g).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&r, &r).unwrap(), 1.0);
        assert_eq!(iou(&r, &r).unwrap(), 1.0);
        let d = mask(2, 2, &[(1, 0)]);
        assert_eq!(dice(&r, &d).unwrap(), 0.0);
    }

    #[test]
    fn empty_conventions() {
        let e = mask(3, 3, &[]);
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert!(assd(&e, &mask(3, 3, &[(1, 1)])).unwrap().is_infinite());
    }

    #[test]
    fn shape_mismatch() {
        assert!(dice(&mask(2, 2, &[]), &mask(2, 3, &[])).is_err());
        assert!(assd(&mask(2, 2, &[]), &mask(3, 2, &[])).is_err());
    }

    #[test]
    fn surfaces() {
        let full = BinaryMask::from_fn(4, 5, |_, _| true);
        assert_eq!(extract_surface(&full).points.len(), 2 * 5 + 2 * 2);
        let one = mask(5, 5, &[(2, 3)]);
        assert_eq!(extract_surface(&one).points, vec![(2, 3)]);
        let square = BinaryMask::from_fn(5, 5, |r, c| (1..=3).contains(&r) && (1..=3).contains(&c));
        let s = extract_surface(&square);
        assert_eq!(s.points.len(), 8);
        assert!(!s.points.contains(&(2, 2)));
    }

    #[test]
    fn assd_single_points() {
        let a = mask(6, 6, &[(0, 0)]);
        let b = mask(6, 6, &[(3, 4)]);
        assert_eq!(assd(&a, &b).unwrap(), 5.0);
        assert_eq!(assd(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn ueo_extremes() {
        let err = mask(2, 3, &[(0, 1), (1, 2)]);
        let exact = Tensor::from_fn(&[1, 2, 3], |i| if i == 1 || i == 5 { 0.9 } else { 0.1 });
        assert_eq!(ueo(&err, &exact, 0.5).unwrap(), 1.0);
        let low = Tensor::full(&[1, 2, 3], 0.2);
        assert_eq!(ueo(&err, &low, 0.5).unwrap(), 0.0);
        assert!(ueo_max(&err, &exact).unwrap() >= ueo(&err, &exact, 0.3).unwrap());
    }

    #[test]
    fn csv_layout() {
        let t = LabelMap::new(1, 2, vec![0, 1]);
        let row = MetricRow::compute("a", &t, &t, &Tensor::full(&[1, 1, 2], 0.1)).unwrap();
        let csv = MetricReport::new(vec![row]).to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[1].starts_with("a,1.000000,1.000000,0.000000,"));
        assert!(lines[2].starts_with("mean,"));
        assert_eq!(lines.len(), 3);
    }
}
