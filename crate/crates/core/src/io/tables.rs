//! Text tables: i-vector sidecars, trial keys, and score files.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;

use super::ivmx::{read_ivmx_file, write_ivmx_file};
use crate::error::{Error, Result};
use crate::eval::{ScoreSet, TrialScore};
use crate::ivector::IVector;
use crate::plda::TrialLabel;

/// One row of a trial key file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialKey {
    pub enroll_id: String,
    pub test_id: String,
    pub label: TrialLabel,
    pub partition: String,
}

/// Write an i-vector set as an IVMX matrix plus a sidecar TSV of
/// utterance id, speaker label, and partition key (empty fields allowed).
pub fn write_ivectors(ivmx_path: &Path, tsv_path: &Path, vectors: &[IVector]) -> Result<()> {
    if vectors.is_empty() {
        return Err(Error::InvalidData("no i-vectors to write".into()));
    }
    let r = vectors[0].dim();
    let mut matrix = Array2::zeros((vectors.len(), r));
    for (i, v) in vectors.iter().enumerate() {
        if v.dim() != r {
            return Err(Error::DimensionMismatch(
                "i-vectors have inconsistent dimensions".into(),
            ));
        }
        matrix.row_mut(i).assign(&v.w);
    }
    write_ivmx_file(ivmx_path, matrix.view())?;

    let mut tsv = std::io::BufWriter::new(std::fs::File::create(tsv_path)?);
    for v in vectors {
        writeln!(
            tsv,
            "{}\t{}\t{}",
            v.utterance_id,
            v.speaker.as_deref().unwrap_or(""),
            v.partition.as_deref().unwrap_or("")
        )?;
    }
    tsv.flush()?;
    Ok(())
}

/// Read an i-vector set written by [`write_ivectors`].
pub fn read_ivectors(ivmx_path: &Path, tsv_path: &Path) -> Result<Vec<IVector>> {
    let matrix = read_ivmx_file(ivmx_path)?;
    let file = std::io::BufReader::new(std::fs::File::open(tsv_path)?);
    let mut vectors = Vec::with_capacity(matrix.nrows());
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.is_empty() || fields.len() > 3 {
            return Err(Error::Format(format!(
                "{}:{}: expected 1-3 tab-separated fields",
                tsv_path.display(),
                i + 1
            )));
        }
        if i >= matrix.nrows() {
            return Err(Error::Format(format!(
                "sidecar {} has more rows than the matrix",
                tsv_path.display()
            )));
        }
        let speaker = fields.get(1).filter(|s| !s.is_empty()).map(|s| s.to_string());
        let partition = fields.get(2).filter(|s| !s.is_empty()).map(|s| s.to_string());
        vectors.push(
            IVector::new(matrix.row(i).to_owned(), fields[0]).with_labels(speaker, partition),
        );
    }
    if vectors.len() != matrix.nrows() {
        return Err(Error::Format(format!(
            "sidecar {} has {} rows for a {}-row matrix",
            tsv_path.display(),
            vectors.len(),
            matrix.nrows()
        )));
    }
    Ok(vectors)
}

/// Trial key TSV: enroll_id, test_id, label, partition_key.
pub fn read_trial_keys(path: &Path) -> Result<Vec<TrialKey>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut keys = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(Error::Format(format!(
                "{}:{}: expected enroll, test, label[, partition]",
                path.display(),
                i + 1
            )));
        }
        keys.push(TrialKey {
            enroll_id: fields[0].to_string(),
            test_id: fields[1].to_string(),
            label: fields[2].parse()?,
            partition: fields.get(3).unwrap_or(&"").to_string(),
        });
    }
    Ok(keys)
}

pub fn write_trial_keys(path: &Path, keys: &[TrialKey]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for k in keys {
        writeln!(file, "{}\t{}\t{}\t{}", k.enroll_id, k.test_id, k.label, k.partition)?;
    }
    file.flush()?;
    Ok(())
}

/// Score lines: "enroll<TAB>test<TAB>score" with six decimals.
pub fn write_scores(path: &Path, scores: &[(String, String, f64)]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for (enroll, test, score) in scores {
        writeln!(file, "{enroll}\t{test}\t{score:.6}")?;
    }
    file.flush()?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut scores = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!(
                "{}:{}: expected enroll, test, score",
                path.display(),
                i + 1
            )));
        }
        let score: f64 = fields[2].parse().map_err(|_| {
            Error::Format(format!("{}:{}: bad score '{}'", path.display(), i + 1, fields[2]))
        })?;
        scores.push((fields[0].to_string(), fields[1].to_string(), score));
    }
    Ok(scores)
}

/// Join a score list against a trial key, requiring an exact key match.
pub fn join_scores_with_keys(
    scores: &[(String, String, f64)],
    keys: &[TrialKey],
) -> Result<ScoreSet> {
    let mut index = std::collections::HashMap::with_capacity(scores.len());
    for (enroll, test, score) in scores {
        index.insert((enroll.as_str(), test.as_str()), *score);
    }
    let mut trials = Vec::with_capacity(keys.len());
    let mut missing = Vec::new();
    for k in keys {
        match index.get(&(k.enroll_id.as_str(), k.test_id.as_str())) {
            Some(&score) => trials.push(TrialScore {
                enroll_id: k.enroll_id.clone(),
                test_id: k.test_id.clone(),
                score,
                label: k.label,
                partition: k.partition.clone(),
            }),
            None => missing.push(format!("({}, {})", k.enroll_id, k.test_id)),
        }
    }
    if !missing.is_empty() {
        let shown = missing.iter().take(5).cloned().collect::<Vec<_>>().join(", ");
        return Err(Error::InvalidData(format!(
            "{} keyed trials have no score: {shown}{}",
            missing.len(),
            if missing.len() > 5 { ", ..." } else { "" }
        )));
    }
    ScoreSet::new(trials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ivector_sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ivmx = dir.path().join("vecs.ivmx");
        let tsv = dir.path().join("vecs.tsv");
        let vectors = vec![
            IVector::new(array![1.0, 2.0], "u1")
                .with_labels(Some("spk1".into()), Some("cmn".into())),
            IVector::new(array![3.0, 4.0], "u2").with_labels(None, None),
        ];
        write_ivectors(&ivmx, &tsv, &vectors).unwrap();
        let back = read_ivectors(&ivmx, &tsv).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].speaker.as_deref(), Some("spk1"));
        assert_eq!(back[0].partition.as_deref(), Some("cmn"));
        assert_eq!(back[1].speaker, None);
        assert_eq!(back[1].w, array![3.0, 4.0]);
    }

    #[test]
    fn trial_keys_roundtrip_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.tsv");
        let keys = vec![
            TrialKey {
                enroll_id: "spk1".into(),
                test_id: "u9".into(),
                label: TrialLabel::Target,
                partition: "f".into(),
            },
            TrialKey {
                enroll_id: "spk2".into(),
                test_id: "u9".into(),
                label: TrialLabel::NonTarget,
                partition: String::new(),
            },
        ];
        write_trial_keys(&path, &keys).unwrap();
        assert_eq!(read_trial_keys(&path).unwrap(), keys);

        std::fs::write(&path, "a\tb\tbogus\t\n").unwrap();
        assert!(read_trial_keys(&path).is_err());
    }

    #[test]
    fn scores_roundtrip_with_six_decimals() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.txt");
        write_scores(
            &path,
            &[("spk1".into(), "u1".into(), 0.31050812345), ("spk2".into(), "u2".into(), -1.5)],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "spk1\tu1\t0.310508\nspk2\tu2\t-1.500000\n");
        let back = read_scores(&path).unwrap();
        assert_eq!(back[0].2, 0.310508);
    }

    #[test]
    fn join_requires_full_coverage() {
        let keys = vec![TrialKey {
            enroll_id: "e".into(),
            test_id: "t".into(),
            label: TrialLabel::Target,
            partition: String::new(),
        }];
        let joined = join_scores_with_keys(&[("e".into(), "t".into(), 1.0)], &keys).unwrap();
        assert_eq!(joined.len(), 1);
        assert!(join_scores_with_keys(&[], &keys).is_err());
    }
}
