//! Equal error rate, the challenge's weighted final score, and score files.
//!
//! Scores follow one polarity: higher means more likely fake. At threshold
//! `t`, a bona fide utterance with score `≥ t` is a false acceptance (it is
//! accepted as fake) and a fake one with score `< t` is a false rejection.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("EER needs at least one bonafide and one fake score")]
    SingleClassInput,
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Bonafide,
    Fake,
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bonafide" => Ok(Self::Bonafide),
            "fake" => Ok(Self::Fake),
            other => Err(format!("unknown label {other:?} (expected bonafide or fake)")),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bonafide => "bonafide",
            Self::Fake => "fake",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub utt_id: String,
    /// Probability of the fake class.
    pub score: f64,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// EER over labelled records; unlabelled records are ignored.
pub fn compute_eer(records: &[ScoreRecord]) -> Result<EerResult, MetricsError> {
    let mut bona = Vec::new();
    let mut fake = Vec::new();
    for r in records {
        match r.label {
            Some(Label::Bonafide) => bona.push(r.score),
            Some(Label::Fake) => fake.push(r.score),
            None => {}
        }
    }
    eer_from_scores(&bona, &fake)
}

/// FAR and FRR are evaluated at `−∞`, every distinct score and `+∞`; the
/// EER is read off where `FAR − FRR` changes sign, interpolating linearly
/// between the two neighbouring thresholds.
pub fn eer_from_scores(bonafide: &[f64], fake: &[f64]) -> Result<EerResult, MetricsError> {
    if bonafide.is_empty() || fake.is_empty() {
        return Err(MetricsError::SingleClassInput);
    }
    if let Some(bad) = bonafide.iter().chain(fake).find(|s| !s.is_finite()) {
        return Err(MetricsError::OutOfRange(format!("non-finite score {bad}")));
    }
    let mut all: Vec<(f64, bool)> = bonafide
        .iter()
        .map(|&s| (s, false))
        .chain(fake.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (nb, nf) = (bonafide.len() as f64, fake.len() as f64);

    // (threshold, FAR, FRR) at −∞, then at each distinct score, then +∞.
    let mut points = vec![(f64::NEG_INFINITY, 1.0, 0.0)];
    let (mut bona_below, mut fake_below) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        points.push((t, 1.0 - bona_below as f64 / nb, fake_below as f64 / nf));
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                fake_below += 1;
            } else {
                bona_below += 1;
            }
            i += 1;
        }
    }
    points.push((f64::INFINITY, 0.0, 1.0));

    let k = points
        .iter()
        .position(|&(_, far, frr)| far - frr <= 0.0)
        .expect("the +inf sentinel always satisfies FAR <= FRR");
    let (t1, far1, frr1) = points[k];
    let d1 = far1 - frr1;
    if d1 == 0.0 {
        return Ok(EerResult { eer: far1, threshold: t1 });
    }
    let (t0, far0, frr0) = points[k - 1];
    let d0 = far0 - frr0;
    let alpha = d0 / (d0 - d1);
    let eer = far0 + alpha * (far1 - far0);
    let threshold = match (t0.is_finite(), t1.is_finite()) {
        (true, true) => t0 + alpha * (t1 - t0),
        (true, false) => t0,
        _ => t1,
    };
    Ok(EerResult { eer, threshold })
}

/// Challenge score: 40% of the first round's EER plus 60% of the second's.
pub fn final_score(round1_eer: f64, round2_eer: f64) -> Result<f64, MetricsError> {
    for (name, v) in [("round 1", round1_eer), ("round 2", round2_eer)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(MetricsError::OutOfRange(format!("{name} EER {v} not in [0, 1]")));
        }
    }
    Ok(0.4 * round1_eer + 0.6 * round2_eer)
}

/// Writes `utt_id<TAB>score` lines with six decimals, plus a label column
/// when the record has one.
pub fn write_scores(path: impl AsRef<Path>, records: &[ScoreRecord]) -> Result<(), MetricsError> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        match r.label {
            Some(l) => writeln!(out, "{}\t{:.6}\t{l}", r.utt_id, r.score)?,
            None => writeln!(out, "{}\t{:.6}", r.utt_id, r.score)?,
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>, MetricsError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let err = |line: usize, msg: String| MetricsError::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&cols.len()) {
            return Err(err(i + 1, format!("expected 2 or 3 tab-separated columns, got {}", cols.len())));
        }
        let score: f64 = cols[1].trim().parse().map_err(|_| err(i + 1, format!("bad score {:?}", cols[1])))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(err(i + 1, format!("score {score} not in [0, 1]")));
        }
        let label = match cols.get(2) {
            Some(l) => Some(l.trim().parse().map_err(|e| err(i + 1, e))?),
            None => None,
        };
        records.push(ScoreRecord {
            utt_id: cols[0].to_string(),
            score,
            label,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(pairs: &[(f64, Label)]) -> Vec<ScoreRecord> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, &(score, l))| ScoreRecord {
                utt_id: format!("u{i}"),
                score,
                label: Some(l),
            })
            .collect()
    }

    #[test]
    fn perfect_and_inverted() {
        let r = compute_eer(&recs(&[(0.9, Label::Fake), (0.1, Label::Bonafide)])).unwrap();
        assert_eq!(r.eer, 0.0);
        let r = compute_eer(&recs(&[(0.1, Label::Fake), (0.9, Label::Bonafide)])).unwrap();
        assert_eq!(r.eer, 1.0);
    }

    #[test]
    fn interpolated_crossing() {
        // bona {0.2, 0.6}, fake {0.4, 0.8}:
        // t=0.4: FAR 1/2, FRR 0 ; t=0.6: FAR 1/2, FRR 1/2 -> meet exactly
        let r = eer_from_scores(&[0.2, 0.6], &[0.4, 0.8]).unwrap();
        assert_eq!(r.eer, 0.5);
        assert_eq!(r.threshold, 0.6);
        // bona {0.1, 0.2, 0.7}, fake {0.5, 0.9}:
        // t=0.5: FAR 1/3, FRR 0 ; t=0.7: FAR 1/3, FRR 1/2 -> d from 1/3 to -1/6
        let r = eer_from_scores(&[0.1, 0.2, 0.7], &[0.5, 0.9]).unwrap();
        assert!((r.eer - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_rejected() {
        assert!(matches!(eer_from_scores(&[0.1], &[]), Err(MetricsError::SingleClassInput)));
        let mut r = recs(&[(0.3, Label::Fake)]);
        r.push(ScoreRecord { utt_id: "x".into(), score: 0.2, label: None });
        assert!(matches!(compute_eer(&r), Err(MetricsError::SingleClassInput)));
    }

    #[test]
    fn final_score_weights() {
        assert!((final_score(0.086, 0.111).unwrap() - 0.1010).abs() < 1e-12);
        assert!((final_score(0.0, 1.0).unwrap() - 0.6).abs() < 1e-15);
        assert!((final_score(0.3, 0.3).unwrap() - 0.3).abs() < 1e-15);
        assert!(matches!(final_score(1.2, 0.1), Err(MetricsError::OutOfRange(_))));
        assert!(final_score(f64::NAN, 0.1).is_err());
    }

    #[test]
    fn score_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.tsv");
        let mut r = recs(&[(0.123_456_7, Label::Fake), (0.5, Label::Bonafide)]);
        r[1].label = None;
        write_scores(&p, &r).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "u0\t0.123457\tfake\nu1\t0.500000\n");
        let back = read_scores(&p).unwrap();
        assert_eq!(back[0].score, 0.123457);
        assert_eq!(back[0].label, Some(Label::Fake));
        assert_eq!(back[1].label, None);
        fs::write(&p, "a\tnope\n").unwrap();
        assert!(matches!(read_scores(&p), Err(MetricsError::Parse { line: 1, .. })));
    }
}
