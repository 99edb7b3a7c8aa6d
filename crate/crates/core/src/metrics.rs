//! Overlap metrics from pixel confusion counts, with per-image and cross-fold aggregation.

use ndarray::{Array2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn add(&mut self, other: &ClassCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Pixel counts per class. Index 0 is background for multi-class maps; a
/// binary map has the single foreground class at index 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: Vec<ClassCounts>,
    /// Whether index 0 is a background class left out of means.
    pub has_background: bool,
}

impl ConfusionCounts {
    /// Element-wise sum, for pooled aggregation.
    pub fn merge(&mut self, other: &ConfusionCounts) -> Result<()> {
        if self.classes.len() != other.classes.len() || self.has_background != other.has_background {
            return Err(Error::Shape("confusion counts cover different classes".into()));
        }
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.add(b);
        }
        Ok(())
    }
}

/// Counts from class-index maps. `classes` is the number of foreground
/// classes; with 1 the maps are binary (0/1).
pub fn confusion_from_classes(pred: &Array2<u8>, gt: &Array2<u8>, classes: usize) -> Result<ConfusionCounts> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    if let Some(&bad) = pred.iter().chain(gt.iter()).find(|&&c| c as usize > classes) {
        return Err(Error::Data(format!("class index {bad} exceeds {classes}")));
    }
    let binary = classes <= 1;
    let n_entries = if binary { 1 } else { classes + 1 };
    let mut counts = vec![ClassCounts::default(); n_entries];
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        for (c, entry) in counts.iter_mut().enumerate() {
            let class = if binary { 1 } else { c as u8 };
            match (p == class, g == class) {
                (true, true) => entry.tp += 1,
                (true, false) => entry.fp += 1,
                (false, true) => entry.fn_ += 1,
                (false, false) => entry.tn += 1,
            }
        }
    }
    Ok(ConfusionCounts {
        classes: counts,
        has_background: !binary,
    })
}

/// Class indices from a hard `[K, H, W]` map (0/1 single channel, or one-hot).
pub fn hard_classes<F: Real>(map: ArrayView3<F>) -> Result<Array2<u8>> {
    let (k, h, w) = map.dim();
    if k == 0 {
        return Err(Error::Shape("label map has no channels".into()));
    }
    if map.iter().any(|&v| v != F::zero() && v != F::one()) {
        return Err(Error::Data("label map is not hard-valued".into()));
    }
    if k == 1 {
        return Ok(map.index_axis(Axis(0), 0).mapv(|v| u8::from(v == F::one())));
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let hot: Vec<usize> = (0..k).filter(|&c| map[[c, y, x]] == F::one()).collect();
            if hot.len() != 1 {
                return Err(Error::Data(format!("pixel ({y}, {x}) is not one-hot")));
            }
            out[[y, x]] = hot[0] as u8;
        }
    }
    Ok(out)
}

/// Counts from hard `[K, H, W]` maps.
pub fn confusion<F: Real>(pred: ArrayView3<F>, gt: ArrayView3<F>) -> Result<ConfusionCounts> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    let k = pred.dim().0;
    let classes = if k == 1 { 1 } else { k - 1 };
    confusion_from_classes(&hard_classes(pred)?, &hard_classes(gt)?, classes)
}

/// Dice, IoU, precision and recall in percent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

impl Scores {
    /// Scores of one class. A class absent from both maps scores 100 everywhere;
    /// otherwise an empty denominator gives 0.
    pub fn from_counts(c: &ClassCounts) -> Self {
        let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
        if c.tp + c.fp + c.fn_ == 0 {
            return Self {
                dice: 100.0,
                iou: 100.0,
                precision: 100.0,
                recall: 100.0,
            };
        }
        let ratio = |num: f64, den: f64| if den > 0.0 { 100.0 * num / den } else { 0.0 };
        Self {
            dice: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
            iou: ratio(tp, tp + fp + fn_),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
        }
    }

    fn map(values: &[Scores], f: impl Fn(&[f64]) -> f64) -> Self {
        let pick = |g: fn(&Scores) -> f64| f(&values.iter().map(g).collect::<Vec<_>>());
        Self {
            dice: pick(|s| s.dice),
            iou: pick(|s| s.iou),
            precision: pick(|s| s.precision),
            recall: pick(|s| s.recall),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    /// Class index; 0 is background when the report has one.
    pub class: usize,
    pub included_in_mean: bool,
    pub scores: Scores,
    /// Population standard deviation across aggregated reports.
    pub sd: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassReport>,
    /// Mean over foreground classes.
    pub mean: Scores,
    pub mean_sd: Scores,
    /// Number of reports aggregated into this one.
    pub aggregated: usize,
}

impl MetricsReport {
    pub fn dice(&self) -> f64 {
        self.mean.dice
    }

    pub fn miou(&self) -> f64 {
        self.mean.iou
    }

    /// One CSV line per class plus a `mean` line, tagged with `fold`.
    pub fn csv_rows(&self, fold: &str) -> Vec<String> {
        let row = |class: &str, s: &Scores, sd: &Scores| {
            format!(
                "{fold},{class},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                s.dice, s.iou, s.precision, s.recall, sd.dice, sd.iou, sd.precision, sd.recall
            )
        };
        let mut rows: Vec<String> = self
            .classes
            .iter()
            .map(|c| row(&c.class.to_string(), &c.scores, &c.sd))
            .collect();
        rows.push(row("mean", &self.mean, &self.mean_sd));
        rows
    }

    pub const CSV_HEADER: &'static str =
        "fold,class,dice,iou,precision,recall,dice_sd,iou_sd,precision_sd,recall_sd";
}

/// Per-class scores and their foreground mean.
pub fn compute_metrics(counts: &ConfusionCounts) -> MetricsReport {
    let classes: Vec<ClassReport> = counts
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| ClassReport {
            class: if counts.has_background { i } else { 1 },
            included_in_mean: !(counts.has_background && i == 0),
            scores: Scores::from_counts(c),
            sd: Scores::default(),
        })
        .collect();
    let included: Vec<Scores> = classes.iter().filter(|c| c.included_in_mean).map(|c| c.scores).collect();
    MetricsReport {
        mean: Scores::map(&included, mean),
        classes,
        mean_sd: Scores::default(),
        aggregated: 1,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn population_sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Mean and population standard deviation of each score across reports.
pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Data("no reports to aggregate".into()))?;
    if reports.iter().any(|r| r.classes.len() != first.classes.len()) {
        return Err(Error::Shape("reports cover different classes".into()));
    }
    let classes = (0..first.classes.len())
        .map(|i| {
            let scores: Vec<Scores> = reports.iter().map(|r| r.classes[i].scores).collect();
            ClassReport {
                class: first.classes[i].class,
                included_in_mean: first.classes[i].included_in_mean,
                scores: Scores::map(&scores, mean),
                sd: Scores::map(&scores, population_sd),
            }
        })
        .collect();
    let means: Vec<Scores> = reports.iter().map(|r| r.mean).collect();
    Ok(MetricsReport {
        classes,
        mean: Scores::map(&means, mean),
        mean_sd: Scores::map(&means, population_sd),
        aggregated: reports.len(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Score every image, then average.
    #[default]
    PerImage,
    /// Sum counts over the dataset, then score once.
    Pooled,
}

/// Dataset-level report from per-image confusion counts.
pub fn evaluate_counts(per_image: &[ConfusionCounts], mode: Aggregation) -> Result<MetricsReport> {
    let first = per_image
        .first()
        .ok_or_else(|| Error::Data("no images to evaluate".into()))?;
    match mode {
        Aggregation::PerImage => {
            let reports: Vec<MetricsReport> = per_image.iter().map(compute_metrics).collect();
            aggregate_folds(&reports)
        }
        Aggregation::Pooled => {
            let mut total = first.clone();
            for c in &per_image[1..] {
                total.merge(c)?;
            }
            Ok(compute_metrics(&total))
        }
    }
}
