//! KNN prediction on learned features, accuracy metrics, and map rendering.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hsi_data::{LabelMap, PatchSample};
use crate::model::{infer, Domain, ModelParams};

/// Majority label among the `k` nearest references by Euclidean distance.
/// Vote ties go to the label with the smaller mean distance, then the smaller
/// class id. Equidistant references are ranked by index.
pub fn knn_predict(
    test: &[Vec<f64>],
    reference: &[Vec<f64>],
    labels: &[u16],
    k: usize,
) -> Result<Vec<u16>> {
    if reference.is_empty() {
        return Err(Error::Evaluation("reference set is empty".into()));
    }
    if reference.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} reference features for {} labels",
            reference.len(),
            labels.len()
        )));
    }
    if k == 0 || k > reference.len() {
        return Err(Error::Evaluation(format!(
            "k = {k} with {} references",
            reference.len()
        )));
    }
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(reference.len());
    let mut out = Vec::with_capacity(test.len());
    for t in test {
        order.clear();
        for (i, r) in reference.iter().enumerate() {
            if r.len() != t.len() {
                return Err(Error::shape("test and reference features differ in width"));
            }
            let d2: f64 = t.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
            order.push((d2.sqrt(), i));
        }
        order.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        // (label, votes, distance sum)
        let mut tally: Vec<(u16, usize, f64)> = Vec::new();
        for &(d, i) in &order[..k] {
            match tally.iter_mut().find(|e| e.0 == labels[i]) {
                Some(e) => {
                    e.1 += 1;
                    e.2 += d;
                }
                None => tally.push((labels[i], 1, d)),
            }
        }
        let best = tally
            .iter()
            .min_by(|a, b| {
                b.1.cmp(&a.1)
                    .then((a.2 / a.1 as f64).total_cmp(&(b.2 / b.1 as f64)))
                    .then(a.0.cmp(&b.0))
            })
            .expect("k ≥ 1");
        out.push(best.0);
    }
    Ok(out)
}

/// Rows are true classes, columns predicted classes, both in `class_ids`
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    class_ids: Vec<u16>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_ids: Vec<u16>) -> Self {
        let n = class_ids.len();
        Self {
            class_ids,
            counts: vec![0; n * n],
        }
    }

    pub fn from_counts(class_ids: Vec<u16>, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != class_ids.len() * class_ids.len() {
            return Err(Error::shape(
                "confusion counts must be square in the class count",
            ));
        }
        Ok(Self { class_ids, counts })
    }

    pub fn from_predictions(class_ids: Vec<u16>, truth: &[u16], predicted: &[u16]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let mut cm = Self::new(class_ids);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    fn index(&self, class: u16) -> Result<usize> {
        self.class_ids
            .iter()
            .position(|&c| c == class)
            .ok_or_else(|| {
                Error::Evaluation(format!("class {class} is not in the confusion matrix"))
            })
    }

    pub fn add(&mut self, truth: u16, predicted: u16) -> Result<()> {
        let n = self.class_ids.len();
        let (t, p) = (self.index(truth)?, self.index(predicted)?);
        self.counts[t * n + p] += 1;
        Ok(())
    }

    pub fn class_ids(&self) -> &[u16] {
        &self.class_ids
    }

    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn get(&self, truth_index: usize, predicted_index: usize) -> u64 {
        self.counts[truth_index * self.n_classes() + predicted_index]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Recall per class in matrix order; `None` when the class has no true
    /// samples.
    pub per_class: Vec<Option<f64>>,
    pub total: u64,
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let n = cm.n_classes();
    let total = cm.total();
    if total == 0 {
        return Err(Error::Evaluation("no samples to score".into()));
    }
    let tf = total as f64;
    let row = |i: usize| (0..n).map(|j| cm.get(i, j)).sum::<u64>();
    let col = |j: usize| (0..n).map(|i| cm.get(i, j)).sum::<u64>();
    let trace: u64 = (0..n).map(|i| cm.get(i, i)).sum();
    let oa = trace as f64 / tf;
    let per_class: Vec<Option<f64>> = (0..n)
        .map(|i| (row(i) > 0).then(|| cm.get(i, i) as f64 / row(i) as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let aa = present.iter().sum::<f64>() / present.len() as f64;
    let pe = (0..n).map(|c| row(c) as f64 * col(c) as f64).sum::<f64>() / (tf * tf);
    let kappa = if pe == 1.0 {
        if oa == 1.0 {
            1.0
        } else {
            return Err(Error::Evaluation(
                "kappa is undefined when chance agreement is 1".into(),
            ));
        }
    } else {
        (oa - pe) / (1.0 - pe)
    };
    Ok(Metrics {
        oa,
        aa,
        kappa,
        per_class,
        total,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub overall: Metrics,
    /// Metrics on boundary patches; `None` when there are none.
    pub boundary: Option<Metrics>,
    pub class_ids: Vec<u16>,
    pub predictions: Vec<u16>,
}

/// Features for `reference` and `test` through the target mapping, KNN
/// predictions for `test`, and metrics overall and on boundary patches.
pub fn evaluate(
    params: &ModelParams,
    reference: &[PatchSample],
    test: &[PatchSample],
    k: usize,
    chunk: usize,
) -> Result<EvalReport> {
    let bands = params
        .bands(Domain::Target)
        .ok_or_else(|| Error::Evaluation("checkpoint has no target mapping layer".into()))?;
    if let Some(s) = reference.iter().chain(test).find(|s| s.channels != bands) {
        return Err(Error::Evaluation(format!(
            "data has {} bands but the checkpoint expects {bands}",
            s.channels
        )));
    }
    if test.is_empty() {
        return Err(Error::Evaluation("test set is empty".into()));
    }
    let features = |s: &[PatchSample]| {
        let refs: Vec<&PatchSample> = s.iter().collect();
        infer(params, Domain::Target, &refs, chunk).map(|(f, _)| f)
    };
    let ref_labels: Vec<u16> = reference.iter().map(|s| s.label).collect();
    let predictions = knn_predict(&features(test)?, &features(reference)?, &ref_labels, k)?;

    let mut class_ids: Vec<u16> = ref_labels
        .iter()
        .chain(test.iter().map(|s| &s.label))
        .copied()
        .collect();
    class_ids.sort_unstable();
    class_ids.dedup();
    let truth: Vec<u16> = test.iter().map(|s| s.label).collect();
    let overall = compute_metrics(&ConfusionMatrix::from_predictions(
        class_ids.clone(),
        &truth,
        &predictions,
    )?)?;

    let (bt, bp): (Vec<u16>, Vec<u16>) = test
        .iter()
        .zip(&predictions)
        .filter(|(s, _)| s.is_boundary)
        .map(|(s, &p)| (s.label, p))
        .unzip();
    let boundary = if bt.is_empty() {
        None
    } else {
        Some(compute_metrics(&ConfusionMatrix::from_predictions(
            class_ids.clone(),
            &bt,
            &bp,
        )?)?)
    };
    Ok(EvalReport {
        overall,
        boundary,
        class_ids,
        predictions,
    })
}

/// `key: value` lines with OA, AA, Kappa, boundary OA and per-class recall.
pub fn format_report(report: &EvalReport) -> String {
    let mut s = String::new();
    let m = &report.overall;
    let _ = writeln!(s, "OA: {:.4}", m.oa);
    let _ = writeln!(s, "AA: {:.4}", m.aa);
    let _ = writeln!(s, "Kappa: {:.4}", m.kappa);
    match &report.boundary {
        Some(b) => {
            let _ = writeln!(s, "boundary_OA: {:.4}", b.oa);
            let _ = writeln!(s, "boundary_samples: {}", b.total);
        }
        None => {
            let _ = writeln!(s, "boundary_OA: n/a");
            let _ = writeln!(s, "boundary_samples: 0");
        }
    }
    let _ = writeln!(s, "test_samples: {}", m.total);
    for (id, acc) in report.class_ids.iter().zip(&m.per_class) {
        match acc {
            Some(a) => {
                let _ = writeln!(s, "class_{id}: {a:.4}");
            }
            None => {
                let _ = writeln!(s, "class_{id}: n/a");
            }
        }
    }
    s
}

/// Mean and sample standard deviation; σ is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `key: mean ± σ` lines over several runs.
pub fn format_summary(seeds: &[u64], reports: &[EvalReport]) -> String {
    let mut s = String::new();
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(s, "seeds: {}", seeds.join(","));
    let line = |s: &mut String, key: &str, vals: Vec<f64>| {
        if vals.is_empty() {
            let _ = writeln!(s, "{key}: n/a");
        } else {
            let (m, sd) = mean_std(&vals);
            let _ = writeln!(s, "{key}: {m:.4} ± {sd:.4}");
        }
    };
    line(&mut s, "OA", reports.iter().map(|r| r.overall.oa).collect());
    line(&mut s, "AA", reports.iter().map(|r| r.overall.aa).collect());
    line(
        &mut s,
        "Kappa",
        reports.iter().map(|r| r.overall.kappa).collect(),
    );
    line(
        &mut s,
        "boundary_OA",
        reports
            .iter()
            .filter_map(|r| r.boundary.as_ref().map(|b| b.oa))
            .collect(),
    );
    s
}

/// Evenly spaced hues at full saturation.
pub fn default_palette(n: usize) -> Vec<[u8; 3]> {
    (0..n)
        .map(|i| {
            let h = i as f64 * 6.0 / n.max(1) as f64;
            let x = 1.0 - ((h % 2.0) - 1.0).abs();
            let (r, g, b) = match h as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [
                (r * 255.0).round() as u8,
                (g * 255.0).round() as u8,
                (b * 255.0).round() as u8,
            ]
        })
        .collect()
}

/// Binary PPM (P6). `predicted` holds one class id per pixel in row-major
/// order; unlabeled pixels in `labels` are black and class `c` is
/// `palette[c − 1]`.
pub fn render_map(predicted: &[u16], labels: &LabelMap, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    let (w, h) = (labels.width(), labels.height());
    if predicted.len() != w * h {
        return Err(Error::Render(format!(
            "{} predictions for a {w}x{h} map",
            predicted.len()
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for (&truth, &p) in labels.labels().iter().zip(predicted) {
        if truth == 0 {
            out.extend_from_slice(&[0, 0, 0]);
            continue;
        }
        let color = (p as usize)
            .checked_sub(1)
            .and_then(|i| palette.get(i))
            .ok_or_else(|| {
                Error::Render(format!(
                    "no palette entry for class {p} ({} colors)",
                    palette.len()
                ))
            })?;
        out.extend_from_slice(color);
    }
    Ok(out)
}
