//! Estimation of prevalences, confusion matrices and service moments from
//! labelled validation data.
//!
//! Input is a UTF-8 CSV with a header naming some of `true_class`, `score`,
//! `predicted_class`, `service_time`. Classes are 1-based in the file.

use std::io::Read;

use serde::Deserialize;
use thiserror::Error;

use crate::model::{ConfusionMatrix, ModelError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("missing column {0}")]
    MissingColumn(&'static str),
    #[error("class {0} has no records")]
    EmptyClass(usize),
    #[error("predicted class {0} never occurs; the confusion matrix would have a zero column")]
    ZeroColumn(usize),
    #[error("need a score threshold or predicted_class labels")]
    NoPredictions,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRecord {
    /// 0-based.
    pub true_class: usize,
    pub score: Option<f64>,
    /// 0-based.
    pub predicted_class: Option<usize>,
    pub service_time: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    true_class: usize,
    #[serde(default)]
    score: Option<f64>,
    #[serde(default)]
    predicted_class: Option<usize>,
    #[serde(default)]
    service_time: Option<f64>,
}

/// Reads records for a `classes`-class problem.
pub fn read_records<R: Read>(input: R, classes: usize) -> Result<Vec<ValidationRecord>, IngestError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    if !headers.iter().any(|h| h == "true_class") {
        return Err(IngestError::MissingColumn("true_class"));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let fail = |message: String| IngestError::Parse { line, message };
        let raw: RawRecord = row.deserialize(Some(&headers)).map_err(|e| fail(e.to_string()))?;
        let check = |c: usize, what: &str| {
            if (1..=classes).contains(&c) {
                Ok(c - 1)
            } else {
                Err(fail(format!("{what} {c} outside 1..={classes}")))
            }
        };
        let true_class = check(raw.true_class, "true_class")?;
        let predicted_class = raw.predicted_class.map(|c| check(c, "predicted_class")).transpose()?;
        if let Some(s) = raw.service_time {
            if !(s > 0.0) || !s.is_finite() {
                return Err(fail(format!("service_time {s} must be positive")));
            }
        }
        if let Some(s) = raw.score {
            if !s.is_finite() {
                return Err(fail("score must be finite".into()));
            }
        }
        out.push(ValidationRecord { true_class, score: raw.score, predicted_class, service_time: raw.service_time });
    }
    Ok(out)
}

/// How predictions are obtained from records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PredictionSource {
    /// Two classes: class 0 iff `score ≥ threshold`.
    Threshold(f64),
    Labels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionEstimate {
    pub confusion: ConfusionMatrix,
    pub prevalences: Vec<f64>,
    pub counts: Vec<Vec<f64>>,
}

/// Row-normalized counts with `alpha` added to every cell.
pub fn estimate_confusion(
    records: &[ValidationRecord],
    classes: usize,
    source: PredictionSource,
    alpha: f64,
) -> Result<ConfusionEstimate, IngestError> {
    let mut counts = vec![vec![0.0; classes]; classes];
    for (i, r) in records.iter().enumerate() {
        let predicted = match source {
            PredictionSource::Threshold(z) => {
                let s = r.score.ok_or(IngestError::Parse { line: i as u64 + 2, message: "missing score".into() })?;
                if s >= z {
                    0
                } else {
                    1
                }
            }
            PredictionSource::Labels => r
                .predicted_class
                .ok_or(IngestError::Parse { line: i as u64 + 2, message: "missing predicted_class".into() })?,
        };
        if predicted >= classes || r.true_class >= classes {
            return Err(IngestError::Parse { line: i as u64 + 2, message: "class out of range".into() });
        }
        counts[r.true_class][predicted] += 1.0;
    }
    let totals: Vec<f64> = counts.iter().map(|row| row.iter().sum()).collect();
    if let Some(k) = totals.iter().position(|&t| t == 0.0) {
        return Err(IngestError::EmptyClass(k));
    }
    let n: f64 = totals.iter().sum();
    let rows: Vec<Vec<f64>> = counts
        .iter()
        .zip(&totals)
        .map(|(row, t)| row.iter().map(|c| (c + alpha) / (t + alpha * classes as f64)).collect())
        .collect();
    if let Some(l) = (0..classes).find(|&l| rows.iter().all(|r| r[l] == 0.0)) {
        return Err(IngestError::ZeroColumn(l));
    }
    Ok(ConfusionEstimate {
        confusion: ConfusionMatrix::from_rows(rows)?,
        prevalences: totals.iter().map(|t| t / n).collect(),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateEstimate {
    pub service_rates: Vec<f64>,
    pub second_moments: Vec<f64>,
}

/// `μ̂_k = 1/mean` and `α̂_k = mean of squares` per true class.
pub fn estimate_rates(records: &[ValidationRecord], classes: usize) -> Result<RateEstimate, IngestError> {
    let mut sums = vec![(0.0, 0.0, 0usize); classes];
    for r in records {
        let Some(s) = r.service_time else {
            return Err(IngestError::MissingColumn("service_time"));
        };
        let e = &mut sums[r.true_class];
        e.0 += s;
        e.1 += s * s;
        e.2 += 1;
    }
    if let Some(k) = sums.iter().position(|e| e.2 == 0) {
        return Err(IngestError::EmptyClass(k));
    }
    Ok(RateEstimate {
        service_rates: sums.iter().map(|e| e.2 as f64 / e.0).collect(),
        second_moments: sums.iter().map(|e| e.1 / e.2 as f64).collect(),
    })
}

/// Scores grouped by true class, for passing-curve estimation.
pub fn scores_by_class(records: &[ValidationRecord], classes: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); classes];
    for r in records {
        if let Some(s) = r.score {
            out[r.true_class].push(s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::sample_classification;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labelled(k: usize, l: usize, n: usize) -> Vec<ValidationRecord> {
        vec![ValidationRecord { true_class: k, score: None, predicted_class: Some(l), service_time: Some(0.5) }; n]
    }

    #[test]
    fn frequency_arithmetic() {
        let mut recs = labelled(0, 0, 9);
        recs.extend(labelled(0, 1, 1));
        recs.extend(labelled(1, 0, 2));
        recs.extend(labelled(1, 1, 8));
        let est = estimate_confusion(&recs, 2, PredictionSource::Labels, 0.0).unwrap();
        assert_eq!(est.confusion.to_rows(), vec![vec![0.9, 0.1], vec![0.2, 0.8]]);
        assert_eq!(est.prevalences, vec![0.5, 0.5]);
        recs.reverse();
        assert_eq!(estimate_confusion(&recs, 2, PredictionSource::Labels, 0.0).unwrap(), est);
    }

    #[test]
    fn perfect_classifier_gives_identity() {
        let mut recs = labelled(0, 0, 3);
        recs.extend(labelled(1, 1, 5));
        recs.extend(labelled(2, 2, 1));
        let est = estimate_confusion(&recs, 3, PredictionSource::Labels, 0.0).unwrap();
        assert!(est.confusion.is_identity());
    }

    #[test]
    fn empty_class_and_zero_column() {
        let recs = labelled(0, 0, 3);
        assert!(matches!(estimate_confusion(&recs, 2, PredictionSource::Labels, 0.0), Err(IngestError::EmptyClass(1))));
        let mut recs = labelled(0, 0, 3);
        recs.extend(labelled(1, 0, 3));
        assert!(matches!(estimate_confusion(&recs, 2, PredictionSource::Labels, 0.0), Err(IngestError::ZeroColumn(1))));
        let smoothed = estimate_confusion(&recs, 2, PredictionSource::Labels, 1.0).unwrap();
        assert_eq!(smoothed.confusion.to_rows(), vec![vec![0.8, 0.2], vec![0.8, 0.2]]);
    }

    #[test]
    fn threshold_predictions() {
        let rec = |k, s| ValidationRecord { true_class: k, score: Some(s), predicted_class: None, service_time: None };
        let recs = vec![rec(0, 0.9), rec(0, 0.4), rec(1, 0.1), rec(1, 0.5)];
        let est = estimate_confusion(&recs, 2, PredictionSource::Threshold(0.5), 0.0).unwrap();
        assert_eq!(est.confusion.to_rows(), vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
    }

    #[test]
    fn synthetic_confusion_concentrates() {
        let q =
            ConfusionMatrix::from_rows(vec![vec![0.7, 0.2, 0.1], vec![0.15, 0.8, 0.05], vec![0.3, 0.3, 0.4]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let recs: Vec<_> = (0..100_000)
            .map(|_| {
                let k = rng.random_range(0..3);
                let l = sample_classification(k, &q, &mut rng);
                ValidationRecord { true_class: k, score: None, predicted_class: Some(l), service_time: None }
            })
            .collect();
        let est = estimate_confusion(&recs, 3, PredictionSource::Labels, 0.0).unwrap();
        for k in 0..3 {
            for l in 0..3 {
                assert!((est.confusion.get(k, l) - q.get(k, l)).abs() < 0.01);
            }
        }
    }

    #[test]
    fn rate_examples() {
        let recs = labelled(0, 0, 4);
        let est = estimate_rates(&recs, 1).unwrap();
        assert_eq!(est.service_rates, vec![2.0]);
        assert_eq!(est.second_moments, vec![0.25]);

        let one = vec![ValidationRecord { true_class: 0, score: None, predicted_class: None, service_time: Some(3.0) }];
        let est = estimate_rates(&one, 1).unwrap();
        assert_eq!((est.service_rates[0], est.second_moments[0]), (1.0 / 3.0, 9.0));
        assert!(matches!(estimate_rates(&one, 2), Err(IngestError::EmptyClass(1))));
    }

    #[test]
    fn exponential_second_moment() {
        let mu = 4.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let recs: Vec<_> = (0..200_000)
            .map(|_| {
                let u: f64 = 1.0 - rng.random::<f64>();
                ValidationRecord { true_class: 0, score: None, predicted_class: None, service_time: Some(-u.ln() / mu) }
            })
            .collect();
        let est = estimate_rates(&recs, 1).unwrap();
        assert!((est.service_rates[0] / mu - 1.0).abs() < 0.01);
        assert!((est.second_moments[0] / (2.0 / (mu * mu)) - 1.0).abs() < 0.03);
    }

    #[test]
    fn csv_parsing_and_line_numbers() {
        let text = "true_class,predicted_class,service_time\n1,1,0.5\n2,1,0.25\n";
        let recs = read_records(text.as_bytes(), 2).unwrap();
        assert_eq!(
            recs[1],
            ValidationRecord { true_class: 1, score: None, predicted_class: Some(0), service_time: Some(0.25) }
        );

        let bad = "true_class,score\n1,0.3\n3,0.2\n";
        match read_records(bad.as_bytes(), 2) {
            Err(IngestError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let bad = "true_class,service_time\n1,-2\n";
        assert!(matches!(read_records(bad.as_bytes(), 2), Err(IngestError::Parse { line: 2, .. })));
        let garbage = "true_class,score\n1,abc\n";
        assert!(matches!(read_records(garbage.as_bytes(), 2), Err(IngestError::Parse { line: 2, .. })));
        assert!(matches!(read_records("score\n0.3\n".as_bytes(), 2), Err(IngestError::MissingColumn("true_class"))));
    }
}
