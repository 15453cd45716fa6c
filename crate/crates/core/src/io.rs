//! Line-delimited JSON datasets, seeded splits and report files.
//!
//! Dataset lines look like
//! `{"id": "..", "question": "..", "reference": ".." | null, "samples": [..]}`
//! with `samples` in generation order and an optional `format_version`
//! (default 1).

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::QaRecord;
use crate::error::{Error, Result};
use crate::metrics::{SweepTable, TrialReport};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Deserialize)]
struct RecordLine {
    id: String,
    question: String,
    #[serde(default)]
    reference: Option<String>,
    samples: Vec<String>,
    #[serde(default)]
    format_version: Option<u32>,
}

#[derive(Serialize)]
struct RecordLineOut<'a> {
    id: &'a str,
    question: &'a str,
    reference: Option<&'a str>,
    samples: &'a [String],
}

/// Parses a dataset, validating each record and rejecting duplicate ids.
/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<Vec<QaRecord>> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(v) = parsed.format_version {
            if v != FORMAT_VERSION {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("unsupported format_version {v}"),
                });
            }
        }
        if !ids.insert(parsed.id.clone()) {
            return Err(Error::DuplicateId {
                id: parsed.id,
                line: line_no,
            });
        }
        let record = QaRecord::new(parsed.id, parsed.question, parsed.samples, parsed.reference);
        records.push(record.validate(false)?);
    }
    Ok(records)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QaRecord>> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn write_dataset<W: Write>(records: &[QaRecord], mut w: W) -> Result<()> {
    for r in records {
        let line = RecordLineOut {
            id: r.id(),
            question: r.question(),
            reference: r.reference(),
            samples: r.samples(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_dataset(records: &[QaRecord], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), |w| write_dataset(records, w))
}

/// Writes through a temporary file in the target directory, then renames it
/// into place.
pub fn write_atomic<F>(path: &Path, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> Result<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// SplitMix64 step: decorrelated per-index seeds from one master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Calibration size `⌊ratio · n⌋`, ignoring float noise just below an integer.
pub fn calibration_size(n: usize, ratio: f64) -> usize {
    let x = ratio * n as f64;
    let nearest = x.round();
    if (x - nearest).abs() < 1e-9 * x.max(1.0) {
        nearest as usize
    } else {
        x.floor() as usize
    }
}

/// Seeded uniform shuffle; the first `⌊ratio · n⌋` records calibrate.
pub fn split(records: &[QaRecord], ratio: f64, seed: u64) -> Result<(Vec<QaRecord>, Vec<QaRecord>)> {
    if records.len() < 2 {
        return Err(Error::TooFewRecords(records.len()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratio {ratio} must lie in (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_cal = calibration_size(records.len(), ratio);
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n_cal]), pick(&order[n_cal..])))
}

/// Something `save_report` can write.
pub enum Report<'a> {
    Trial(&'a TrialReport<f64>),
    Sweep(&'a SweepTable),
}

/// Files produced by [`save_report`].
#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub rows: PathBuf,
    pub aggregate: Option<PathBuf>,
    pub sidecar: PathBuf,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    write_atomic(path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        for r in rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    })
}

/// Writes the row CSV at `path`, an aggregate CSV next to it for sweeps
/// (`<stem>.aggregate.csv`), and a JSON sidecar (`<stem>.json`) holding
/// `config` plus the full report.
pub fn save_report(report: &Report<'_>, config: &serde_json::Value, path: impl AsRef<Path>) -> Result<ReportPaths> {
    let path = path.as_ref();
    let sidecar = sibling(path, ".json");
    let (aggregate, body) = match report {
        Report::Trial(t) => {
            write_csv(path, &[t.to_row(0)])?;
            (None, serde_json::to_value(t)?)
        }
        Report::Sweep(s) => {
            write_csv(path, &s.rows)?;
            let agg = sibling(path, ".aggregate.csv");
            write_csv(&agg, &s.aggregates)?;
            (Some(agg), serde_json::json!({ "aggregates": s.aggregates }))
        }
    };
    let doc = serde_json::json!({ "config": config, "report": body });
    write_atomic(&sidecar, |w| {
        serde_json::to_writer_pretty(&mut *w, &doc)?;
        Ok(())
    })?;
    Ok(ReportPaths {
        rows: path.to_path_buf(),
        aggregate,
        sidecar,
    })
}
