use std::fmt::Write as _;

use crate::data::{stack, Sample, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::net::{GateMode, Model};
use crate::tensor::Tensor;

/// `2|P ∩ T| / (|P| + |T|)` for one class; 1 when both sets are empty.
pub fn dice(pred: &[u8], truth: &[u8], class: u8) -> f64 {
    let c = Counts::of(pred, truth, class);
    c.dice()
}

/// True/false positive and false negative pixel counts of one class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn of(pred: &[u8], truth: &[u8], class: u8) -> Self {
        assert_eq!(pred.len(), truth.len(), "mask sizes differ");
        let mut c = Counts::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == class, t == class) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        c
    }

    pub fn add(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }

    /// `2TP / (2TP + FP + FN)`, with 1 when all counts are zero.
    pub fn dice(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / d as f64
        }
    }

    /// Harmonic mean of precision and recall; equal to [`Counts::dice`] on pooled counts.
    pub fn f1(&self) -> f64 {
        self.dice()
    }
}

/// Micro F1 of one class over a set of mask pairs.
pub fn f1(pairs: &[(&[u8], &[u8])], class: u8) -> f64 {
    let mut total = Counts::default();
    for (p, t) in pairs {
        total.add(Counts::of(p, t, class));
    }
    total.f1()
}

/// Per-pixel argmax over the channel axis of `[B,C,H,W]` logits. Ties go to
/// the lowest class id.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<u8>> {
    let [b, c, h, w] = logits.dims4("argmax")?;
    let hw = h * w;
    let z = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if z[(bi * c + k) * hw + p] > z[(bi * c + best) * hw + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub name: String,
    /// Percent.
    pub dice: f64,
    /// Percent.
    pub f1: f64,
    /// `(dice + f1) / 2`, percent.
    pub average: f64,
    /// Whether the class occurs in any ground-truth mask of the set.
    pub present: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub images: usize,
    pub classes: Vec<ClassMetrics>,
}

impl MetricsReport {
    fn mean_over(&self, fg_only: bool, f: impl Fn(&ClassMetrics) -> f64) -> f64 {
        let sel: Vec<f64> = self
            .classes
            .iter()
            .enumerate()
            .filter(|(i, c)| c.present && (!fg_only || *i > 0))
            .map(|(_, c)| f(c))
            .collect();
        if sel.is_empty() {
            0.0
        } else {
            sel.iter().sum::<f64>() / sel.len() as f64
        }
    }

    /// Macro means over classes present in the ground truth.
    pub fn mean_dice(&self) -> f64 {
        self.mean_over(false, |c| c.dice)
    }

    pub fn mean_f1(&self) -> f64 {
        self.mean_over(false, |c| c.f1)
    }

    pub fn mean_average(&self) -> f64 {
        self.mean_over(false, |c| c.average)
    }

    /// Mean Dice over present non-background classes.
    pub fn foreground_dice(&self) -> f64 {
        self.mean_over(true, |c| c.dice)
    }

    pub fn foreground_average(&self) -> f64 {
        self.mean_over(true, |c| c.average)
    }

    /// Plain-text table with Dice, F1 and Average columns.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>8}", "class", "Dice", "F1", "Average");
        for c in &self.classes {
            let mark = if c.present { "" } else { "  (absent)" };
            let _ = writeln!(
                s,
                "{:<12} {:>8.2} {:>8.2} {:>8.2}{mark}",
                c.name, c.dice, c.f1, c.average
            );
        }
        let _ = writeln!(
            s,
            "{:<12} {:>8.2} {:>8.2} {:>8.2}",
            "mean",
            self.mean_dice(),
            self.mean_f1(),
            self.mean_average()
        );
        let _ = writeln!(
            s,
            "{:<12} {:>8.2} {:>8} {:>8.2}",
            "foreground",
            self.foreground_dice(),
            "",
            self.foreground_average()
        );
        s
    }

    /// `key=value` lines with full-precision values.
    pub fn to_kv(&self) -> String {
        let mut s = format!("images={}\n", self.images);
        for c in &self.classes {
            let _ = writeln!(s, "{}.present={}", c.name, c.present);
            let _ = writeln!(s, "{}.dice={:e}", c.name, c.dice);
            let _ = writeln!(s, "{}.f1={:e}", c.name, c.f1);
            let _ = writeln!(s, "{}.average={:e}", c.name, c.average);
        }
        let _ = writeln!(s, "mean.dice={:e}", self.mean_dice());
        let _ = writeln!(s, "mean.f1={:e}", self.mean_f1());
        let _ = writeln!(s, "mean.average={:e}", self.mean_average());
        let _ = writeln!(s, "foreground.dice={:e}", self.foreground_dice());
        s
    }

    /// Class-wise mean of several reports (e.g. across seeds).
    pub fn mean_of(reports: &[MetricsReport]) -> Result<MetricsReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Contract("no reports to average".into()))?;
        let n = reports.len() as f64;
        let classes = (0..first.classes.len())
            .map(|k| {
                let col = |f: fn(&ClassMetrics) -> f64| {
                    reports.iter().map(|r| f(&r.classes[k])).sum::<f64>() / n
                };
                ClassMetrics {
                    name: first.classes[k].name.clone(),
                    dice: col(|c| c.dice),
                    f1: col(|c| c.f1),
                    average: col(|c| c.average),
                    present: reports.iter().any(|r| r.classes[k].present),
                }
            })
            .collect();
        Ok(MetricsReport {
            images: first.images,
            classes,
        })
    }
}

/// Accumulates per-image Dice (macro) and pooled counts (micro F1).
///
/// A class's macro Dice averages over the images where it occurs in the
/// truth or the prediction; it is 1 when no image has it at all.
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    dice_sum: Vec<f64>,
    dice_images: Vec<usize>,
    counts: Vec<Counts>,
    present: Vec<bool>,
    images: usize,
}

impl MetricsAccumulator {
    pub fn new(classes: usize) -> Self {
        MetricsAccumulator {
            dice_sum: vec![0.0; classes],
            dice_images: vec![0; classes],
            counts: vec![Counts::default(); classes],
            present: vec![false; classes],
            images: 0,
        }
    }

    /// Adds one image's prediction and ground truth.
    pub fn add(&mut self, pred: &[u8], truth: &[u8]) {
        for k in 0..self.dice_sum.len() {
            let c = Counts::of(pred, truth, k as u8);
            if c.tp + c.fp + c.fn_ > 0 {
                self.dice_sum[k] += c.dice();
                self.dice_images[k] += 1;
            }
            self.counts[k].add(c);
            self.present[k] |= c.tp + c.fn_ > 0;
        }
        self.images += 1;
    }

    pub fn finish(&self) -> MetricsReport {
        let classes = (0..self.dice_sum.len())
            .map(|k| {
                let d = match self.dice_images[k] {
                    0 => 100.0,
                    n => 100.0 * self.dice_sum[k] / n as f64,
                };
                let f = 100.0 * self.counts[k].f1();
                ClassMetrics {
                    name: CLASS_NAMES
                        .get(k)
                        .map_or_else(|| format!("class{k}"), |s| s.to_string()),
                    dice: d,
                    f1: f,
                    average: 0.5 * (d + f),
                    present: self.present[k],
                }
            })
            .collect();
        MetricsReport {
            images: self.images,
            classes,
        }
    }
}

/// Eval-mode predictions for `data`, batch by batch in order.
pub fn predict(model: &Model, data: &[Sample], batch: usize, gates: GateMode) -> Result<Vec<Vec<u8>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, _) = stack(&refs)?;
        let logits = model.infer(&images, gates)?;
        let classes = argmax_classes(&logits)?;
        let hw = chunk[0].mask.len();
        out.extend(classes.chunks(hw).map(|c| c.to_vec()));
    }
    Ok(out)
}

/// Per-class Dice (per-image macro), F1 (dataset micro) and their average.
pub fn evaluate(model: &Model, data: &[Sample], gates: GateMode) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let preds = predict(model, data, 8, gates)?;
    Ok(score(&preds, data.iter().map(|s| s.mask.as_slice()), model.config().num_classes))
}

/// Metrics for precomputed predictions.
pub fn score<'a>(
    preds: &[Vec<u8>],
    truths: impl IntoIterator<Item = &'a [u8]>,
    classes: usize,
) -> MetricsReport {
    let mut acc = MetricsAccumulator::new(classes);
    for (p, t) in preds.iter().zip(truths) {
        acc.add(p, t);
    }
    acc.finish()
}
