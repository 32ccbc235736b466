//! Confusion counts, the four headline metrics, and recovery of integer
//! confusion matrices from published one-decimal percentages.
//!
//! Rates are kept as exact fractions so that rounding to a tenth of a percent
//! is decided by integer arithmetic, never by a float that lands a hair below
//! a `.x5` tie.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::classifier::ModelArtifact;
use crate::dataset::DatasetManifest;
use crate::imaging::load_image;
use crate::types::{Label, Split};

/// Searches without a total hint stop at this many frames.
pub const RECONCILE_DEFAULT_MAX_TOTAL: u64 = 200;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {predictions} predictions, {truths} truths, {strata} strata")]
    LengthMismatch {
        predictions: usize,
        truths: usize,
        strata: usize,
    },
    #[error("no confusion matrix with total <= {max_total} reproduces the given rates")]
    NoSolution { max_total: u64 },
    #[error("invalid rate {0}: percentages must lie in [0, 100]")]
    InvalidRate(f64),
    #[error("cannot read frame {path}: {reason}")]
    Frame { path: String, reason: String },
}

/// Evaluation stratum. `internal` / `external` refer to the camera the holdout
/// frame was recorded with relative to the training equipment.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stratum {
    Overall,
    Internal,
    External,
    Custom(String),
}

impl Stratum {
    pub fn as_str(&self) -> &str {
        match self {
            Stratum::Overall => "overall",
            Stratum::Internal => "internal",
            Stratum::External => "external",
            Stratum::Custom(name) => name,
        }
    }
}

impl fmt::Display for Stratum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stratum {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "overall" => Stratum::Overall,
            "internal" => Stratum::Internal,
            "external" => Stratum::External,
            other => Stratum::Custom(other.to_string()),
        })
    }
}

impl Serialize for Stratum {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Stratum {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().expect("infallible"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub stratum: Stratum,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self {
            tp,
            fp,
            fn_,
            tn,
            stratum: Stratum::Overall,
        }
    }

    pub fn with_stratum(mut self, stratum: Stratum) -> Self {
        self.stratum = stratum;
        self
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn quadruple(&self) -> (u64, u64, u64, u64) {
        (self.tp, self.fp, self.fn_, self.tn)
    }

    fn record(&mut self, predicted: Label, truth: Label) {
        match (predicted.is_positive(), truth.is_positive()) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }
}

/// An exact ratio `num / den` with `den > 0`. Serialized as the ratio value.
#[derive(Debug, Clone, Copy)]
pub struct Rate {
    num: u64,
    den: u64,
}

impl Rate {
    pub fn new(num: u64, den: u64) -> Option<Rate> {
        (den > 0).then_some(Rate { num, den })
    }

    pub fn numerator(&self) -> u64 {
        self.num
    }

    pub fn denominator(&self) -> u64 {
        self.den
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn percent(&self) -> f64 {
        100.0 * self.value()
    }

    /// The percentage in tenths, rounded half-up: 11/16 = 68.75% gives 688.
    pub fn percent_tenths(&self) -> u64 {
        let (num, den) = (self.num as u128, self.den as u128);
        ((2000 * num + den) / (2 * den)) as u64
    }

    /// `68.8` for 11/16.
    pub fn rounded_percent(&self) -> f64 {
        self.percent_tenths() as f64 / 10.0
    }
}

impl PartialEq for Rate {
    fn eq(&self, other: &Self) -> bool {
        self.num as u128 * other.den as u128 == other.num as u128 * self.den as u128
    }
}

impl fmt::Display for Rate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.percent_tenths();
        write!(f, "{}.{}%", t / 10, t % 10)
    }
}

impl Serialize for Rate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

/// Metrics of one stratum. `None` marks a metric whose denominator is zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub recall: Option<Rate>,
    pub precision: Option<Rate>,
    pub accuracy: Option<Rate>,
    pub f1: Option<Rate>,
}

impl MetricsReport {
    /// `[recall, precision, accuracy, f1]` in tenths of a percent.
    pub fn percent_tenths(&self) -> [Option<u64>; 4] {
        [self.recall, self.precision, self.accuracy, self.f1].map(|r| r.map(|r| r.percent_tenths()))
    }
}

/// Tallies predictions against truths, fluorescent being the positive class.
/// The first entry is always the overall stratum; the others follow in order
/// of first appearance. Frames tagged `overall` count only towards the total.
pub fn confusion(
    predictions: &[Label],
    truths: &[Label],
    strata: &[Stratum],
) -> Result<Vec<ConfusionCounts>, EvalError> {
    if predictions.len() != truths.len() || strata.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            truths: truths.len(),
            strata: strata.len(),
        });
    }
    let mut out = vec![ConfusionCounts::new(0, 0, 0, 0)];
    for ((&p, &t), s) in predictions.iter().zip(truths).zip(strata) {
        out[0].record(p, t);
        if *s == Stratum::Overall {
            continue;
        }
        let i = match out.iter().position(|c| c.stratum == *s) {
            Some(i) => i,
            None => {
                out.push(ConfusionCounts::new(0, 0, 0, 0).with_stratum(s.clone()));
                out.len() - 1
            }
        };
        out[i].record(p, t);
    }
    Ok(out)
}

pub fn metrics(counts: &ConfusionCounts) -> MetricsReport {
    let (tp, fp, fn_, tn) = counts.quadruple();
    let recall = Rate::new(tp, tp + fn_);
    let precision = Rate::new(tp, tp + fp);
    // 2PR/(P+R) simplifies to 2tp/(2tp+fp+fn); P+R > 0 exactly when tp > 0
    let f1 = match (recall, precision) {
        (Some(_), Some(_)) if tp > 0 => Rate::new(2 * tp, 2 * tp + fp + fn_),
        _ => None,
    };
    MetricsReport {
        counts: counts.clone(),
        recall,
        precision,
        accuracy: Rate::new(tp + tn, counts.total()),
        f1,
    }
}

fn to_tenths(percent: f64) -> Result<u64, EvalError> {
    if !(0.0..=100.0).contains(&percent) {
        return Err(EvalError::InvalidRate(percent));
    }
    Ok((percent * 10.0).round() as u64)
}

/// Every `(tp, fp, fn, tn)` whose recall, precision, accuracy and F1 round
/// (half-up, one decimal) to the given percentages. `total_hint` and
/// `positives_hint` (tp + fn) restrict the search exactly; without a total
/// hint the search covers totals up to [`RECONCILE_DEFAULT_MAX_TOTAL`].
/// Results are ordered by total, then lexicographically.
pub fn reconcile_rates(
    recall: f64,
    precision: f64,
    accuracy: f64,
    f1: f64,
    total_hint: Option<u64>,
    positives_hint: Option<u64>,
) -> Result<Vec<ConfusionCounts>, EvalError> {
    let target = [
        Some(to_tenths(recall)?),
        Some(to_tenths(precision)?),
        Some(to_tenths(accuracy)?),
        Some(to_tenths(f1)?),
    ];
    let max_total = total_hint.map_or(RECONCILE_DEFAULT_MAX_TOTAL, |t| {
        t.max(RECONCILE_DEFAULT_MAX_TOTAL)
    });
    let totals = match total_hint {
        Some(t) => t..=t,
        None => 1..=max_total,
    };
    let mut found = Vec::new();
    for total in totals {
        for tp in 0..=total {
            for fp in 0..=total - tp {
                for fn_ in 0..=total - tp - fp {
                    if positives_hint.is_some_and(|p| p != tp + fn_) {
                        continue;
                    }
                    let counts = ConfusionCounts::new(tp, fp, fn_, total - tp - fp - fn_);
                    if metrics(&counts).percent_tenths() == target {
                        found.push(counts);
                    }
                }
            }
        }
    }
    if found.is_empty() {
        return Err(EvalError::NoSolution { max_total });
    }
    Ok(found)
}

/// Conventional row label for a stratum in a metrics table.
pub fn row_label(stratum: &Stratum) -> String {
    match stratum {
        Stratum::Overall => "Validation overall".to_string(),
        Stratum::Internal => "Validation - internal data".to_string(),
        Stratum::External => "Validation - external data".to_string(),
        Stratum::Custom(name) => name.clone(),
    }
}

/// Plain-text table with one row per report, columns recall, precision,
/// accuracy and F1. Undefined cells print as `n/a`.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    const HEADERS: [&str; 4] = ["Recall / Sensitivity", "Precision / PPV", "Accuracy", "F1 score"];
    let label_width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let cell = |r: Option<Rate>| r.map_or_else(|| "n/a".to_string(), |r| r.to_string());
    let mut out = format!("{:<label_width$}", "");
    for h in HEADERS {
        out += &format!("  {h:>w$}", w = h.len());
    }
    out += &format!("  {:>12}\n", "tp/fp/fn/tn");
    for (label, report) in rows {
        out += &format!("{label:<label_width$}");
        let cells = [report.recall, report.precision, report.accuracy, report.f1];
        for (h, c) in HEADERS.iter().zip(cells) {
            out += &format!("  {:>w$}", cell(c), w = h.len());
        }
        let (tp, fp, fn_, tn) = report.counts.quadruple();
        out += &format!("  {:>12}\n", format!("{tp}/{fp}/{fn_}/{tn}"));
    }
    out
}

/// Classifies every frame of `split` and reports the overall row, followed by
/// `internal` and `external` rows when `by_camera` is set. A frame is internal
/// when its camera also recorded frames of the train split.
pub fn evaluate_split(
    artifact: &ModelArtifact,
    manifest: &DatasetManifest,
    split: Split,
    by_camera: bool,
) -> Result<Vec<MetricsReport>, EvalError> {
    let internal = manifest.train_cameras();
    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    let mut strata = Vec::new();
    for r in manifest.split(split) {
        let image = load_image(&r.path).map_err(|e| EvalError::Frame {
            path: r.path.display().to_string(),
            reason: e.to_string(),
        })?;
        predictions.push(artifact.predict(&image).label);
        truths.push(r.label());
        strata.push(match (by_camera, internal.contains(&r.camera_id)) {
            (false, _) => Stratum::Overall,
            (true, true) => Stratum::Internal,
            (true, false) => Stratum::External,
        });
    }
    let mut counts = confusion(&predictions, &truths, &strata)?;
    // fixed row order regardless of which camera came first
    counts[1..].sort_by(|a, b| a.stratum.cmp(&b.stratum));
    Ok(counts.iter().map(metrics).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Fluorescent as F, NotFluorescent as N};

    fn tenths(c: (u64, u64, u64, u64)) -> [Option<u64>; 4] {
        metrics(&ConfusionCounts::new(c.0, c.1, c.2, c.3)).percent_tenths()
    }

    #[test]
    fn overall_row_reconciles_to_a_unique_matrix() {
        let found = reconcile_rates(68.8, 91.7, 80.0, 78.6, Some(30), Some(16)).unwrap();
        let quads: Vec<_> = found.iter().map(ConfusionCounts::quadruple).collect();
        assert_eq!(quads, vec![(11, 1, 5, 13)]);
        assert_eq!(
            tenths((11, 1, 5, 13)),
            [Some(688), Some(917), Some(800), Some(786)]
        );
    }

    #[test]
    fn per_equipment_rows() {
        assert_eq!(
            tenths((3, 0, 2, 5)),
            [Some(600), Some(1000), Some(800), Some(750)]
        );
        assert_eq!(tenths((5, 1, 1, 3)), [Some(833), Some(833), Some(800), Some(833)]);
    }

    #[test]
    fn unhinted_search_lists_multiples_after_the_minimal_solution() {
        let found = reconcile_rates(60.0, 100.0, 80.0, 75.0, None, None).unwrap();
        assert_eq!(found[0].quadruple(), (3, 0, 2, 5));
        assert!(found.iter().any(|c| c.quadruple() == (6, 0, 4, 10)));
        assert!(found.windows(2).all(|w| w[0].total() <= w[1].total()));
        for c in &found {
            assert_eq!(
                metrics(c).percent_tenths(),
                [Some(600), Some(1000), Some(800), Some(750)]
            );
        }
    }

    #[test]
    fn perfection_forces_zero_errors() {
        let found = reconcile_rates(100.0, 100.0, 100.0, 100.0, Some(10), Some(4)).unwrap();
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].quadruple(), (4, 0, 0, 6));
    }

    #[test]
    fn unreachable_rates_report_no_solution() {
        assert_eq!(
            reconcile_rates(50.0, 50.0, 100.0, 50.0, Some(10), None),
            Err(EvalError::NoSolution { max_total: 200 })
        );
        assert_eq!(
            reconcile_rates(101.0, 0.0, 0.0, 0.0, None, None),
            Err(EvalError::InvalidRate(101.0))
        );
    }

    #[test]
    fn degenerate_denominators_are_undefined_not_zero() {
        let m = metrics(&ConfusionCounts::new(0, 0, 3, 7));
        assert!(m.precision.is_none());
        assert!(m.f1.is_none());
        assert_eq!(m.recall, Rate::new(0, 3));
        assert_eq!(m.accuracy.unwrap().percent_tenths(), 700);
        let empty = metrics(&ConfusionCounts::new(0, 0, 0, 0));
        assert_eq!(empty.percent_tenths(), [None; 4]);
        let json = serde_json::to_value(&m).unwrap();
        assert!(json["precision"].is_null());
        assert_eq!(json["counts"]["fn"], 3);
    }

    #[test]
    fn half_up_rounding_is_exact() {
        // 11/16 = 68.75 exactly, 1/8 = 12.5 exactly
        assert_eq!(Rate::new(11, 16).unwrap().percent_tenths(), 688);
        assert_eq!(Rate::new(1, 800).unwrap().percent_tenths(), 1);
        assert_eq!(Rate::new(1, 3).unwrap().to_string(), "33.3%");
    }

    #[test]
    fn confusion_strata_sum_to_overall() {
        let preds = [F, F, N, N, F, N, F];
        let truths = [F, N, F, N, F, N, N];
        let strata = [
            Stratum::Internal,
            Stratum::External,
            Stratum::Internal,
            Stratum::Custom("other".into()),
            Stratum::External,
            Stratum::Internal,
            Stratum::Custom("other".into()),
        ];
        let counts = confusion(&preds, &truths, &strata).unwrap();
        assert_eq!(counts[0].stratum, Stratum::Overall);
        assert_eq!(counts[0].quadruple(), (2, 2, 1, 2));
        let mut sum = (0, 0, 0, 0);
        for c in &counts[1..] {
            sum = (sum.0 + c.tp, sum.1 + c.fp, sum.2 + c.fn_, sum.3 + c.tn);
        }
        assert_eq!(sum, counts[0].quadruple());
        assert_eq!(counts.len(), 4);
    }

    #[test]
    fn confusion_examples() {
        let truths = [F, F, F, F, F, N, N, N, N, N];
        let tags = vec![Stratum::Overall; 10];
        let c = confusion(&truths, &truths, &tags).unwrap();
        assert_eq!(c, vec![ConfusionCounts::new(5, 0, 0, 5)]);
        let m = metrics(&c[0]);
        assert_eq!(m.percent_tenths(), [Some(1000); 4]);

        let neg = [N; 4];
        let c = confusion(&[F; 4], &neg, &tags[..4]).unwrap();
        assert_eq!(c[0].fp, 4);

        assert!(matches!(
            confusion(&[F], &[F, N], &tags[..2]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn table_has_one_row_per_report() {
        let rows = vec![
            ("Training".to_string(), metrics(&ConfusionCounts::new(4, 0, 0, 6))),
            (
                row_label(&Stratum::Overall),
                metrics(&ConfusionCounts::new(11, 1, 5, 13)),
            ),
            ("empty".to_string(), metrics(&ConfusionCounts::new(0, 0, 0, 0))),
        ];
        let table = format_table(&rows);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].contains("100.0%"));
        assert!(lines[2].contains("68.8%") && lines[2].contains("91.7%") && lines[2].contains("78.6%"));
        assert!(lines[3].contains("n/a"));
    }
}
