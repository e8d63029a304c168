use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, DatasetMeta, Impression, Result};

/// Present in the header when a pairing pass has attached diff references.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairingInfo {
    pub min_gap: i64,
    pub max_gap: i64,
    pub domain: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub meta: DatasetMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairing: Option<PairingInfo>,
}

/// One body line: an impression plus the optional diff record index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub imp: Impression,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diff: Option<usize>,
}

#[derive(Serialize)]
struct RecordRef<'a> {
    imp: &'a Impression,
    #[serde(skip_serializing_if = "Option::is_none")]
    diff: Option<usize>,
}

/// Streaming reader; the header is parsed and validated on open.
pub struct DatasetReader {
    header: Header,
    lines: Lines<BufReader<File>>,
    line: usize,
}

impl DatasetReader {
    pub fn header(&self) -> &Header {
        &self.header
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.header.meta
    }
}

impl Iterator for DatasetReader {
    type Item = Result<Record>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let raw = self.lines.next()?;
            self.line += 1;
            let line = self.line;
            let text = match raw {
                Ok(t) => t,
                Err(e) => {
                    return Some(Err(DataError::Malformed {
                        line,
                        message: e.to_string(),
                    }))
                }
            };
            if text.trim().is_empty() {
                continue;
            }
            let parsed = serde_json::from_str::<Record>(&text)
                .map_err(|e| DataError::Malformed {
                    line,
                    message: e.to_string(),
                })
                .and_then(|r| self.header.meta.check(&r.imp, line).map(|()| r));
            return Some(parsed);
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<DatasetReader> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| DataError::Malformed {
            line: 1,
            message: "missing header".into(),
        })?
        .map_err(io_err(path))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| DataError::Malformed {
        line: 1,
        message: e.to_string(),
    })?;
    header.meta.validate()?;
    Ok(DatasetReader {
        header,
        lines,
        line: 1,
    })
}

/// Writes header then one record per line. Output bytes depend only on the
/// inputs.
pub fn write_dataset(
    path: impl AsRef<Path>,
    header: &Header,
    impressions: &[Impression],
    diffs: Option<&[Option<usize>]>,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(d) = diffs {
        assert_eq!(d.len(), impressions.len(), "one diff slot per impression");
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let to_io = |e: serde_json::Error| std::io::Error::other(e);
    (|| -> std::io::Result<()> {
        serde_json::to_writer(&mut w, header).map_err(to_io)?;
        w.write_all(b"\n")?;
        for (i, imp) in impressions.iter().enumerate() {
            let rec = RecordRef {
                imp,
                diff: diffs.and_then(|d| d[i]),
            };
            serde_json::to_writer(&mut w, &rec).map_err(to_io)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    })()
    .map_err(io_err(path))
}

/// A whole dataset held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: Header,
    pub impressions: Vec<Impression>,
    pub diffs: Vec<Option<usize>>,
}

impl Dataset {
    pub fn new(meta: DatasetMeta, impressions: Vec<Impression>) -> Self {
        let n = impressions.len();
        Self {
            header: Header { meta, pairing: None },
            impressions,
            diffs: vec![None; n],
        }
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.header.meta
    }

    pub fn len(&self) -> usize {
        self.impressions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.impressions.is_empty()
    }

    pub fn is_paired(&self) -> bool {
        self.header.pairing.is_some()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = read_dataset(path)?;
        let header = reader.header().clone();
        let mut impressions = Vec::new();
        let mut diffs = Vec::new();
        for rec in reader {
            let rec = rec?;
            impressions.push(rec.imp);
            diffs.push(rec.diff);
        }
        if let Some((i, &Some(d))) = diffs.iter().enumerate().find(|(_, d)| d.is_some_and(|d| d >= impressions.len())) {
            return Err(DataError::Invariant {
                line: i + 2,
                message: format!("diff reference {d} beyond {} records", impressions.len()),
            });
        }
        Ok(Self {
            header,
            impressions,
            diffs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let diffs = self.is_paired().then_some(self.diffs.as_slice());
        write_dataset(path, &self.header, &self.impressions, diffs)
    }

    /// Same impressions with the pair column and pairing header removed.
    pub fn without_pairs(&self) -> Self {
        Self::new(self.header.meta.clone(), self.impressions.clone())
    }
}
