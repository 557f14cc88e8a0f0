//! Label-first, tab-separated instance files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use mvfs_core::data::{build_vocab, parse_label, Dataset, Vocabulary};

use crate::error::{Error, Result};

/// Written for the OOV slot, which has no token of its own.
pub const OOV_TOKEN: &str = "<oov>";

/// Reads `label\ttok_1\t…\ttok_N` lines. Blank lines are skipped; every
/// other line must have the same column count and a 0/1 label.
pub fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut columns = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split('\t').map(str::to_owned).collect();
        if row.len() < 2 {
            return Err(Error::malformed(
                path,
                lineno,
                "expected a label and at least one field",
            ));
        }
        match columns {
            None => columns = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::malformed(
                    path,
                    lineno,
                    format!("expected {c} columns, found {}", row.len()),
                ))
            }
            _ => {}
        }
        parse_label(&row[0]).map_err(|e| Error::malformed(path, lineno, e.to_string()))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::malformed(path, 0, "no instances"));
    }
    Ok(rows)
}

/// Reads a TSV file, encoding with `vocab` or, when absent, with a
/// vocabulary built from the file itself.
pub fn read_tsv(path: &Path, vocab: Option<&Vocabulary>, min_freq: usize) -> Result<(Dataset, Vocabulary)> {
    let rows = read_rows(path)?;
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => build_vocab(&rows, min_freq).map_err(|e| Error::malformed(path, 0, e.to_string()))?,
    };
    let mut instances = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let inst = vocab
            .encode_row(row)
            .map_err(|e| Error::malformed(path, i + 1, e.to_string()))?;
        instances.push(inst);
    }
    let ds = Dataset::new(vocab.schema(), instances).map_err(|e| Error::malformed(path, 0, e.to_string()))?;
    Ok((ds, vocab))
}

/// Writes `ds` with the tokens of `vocab`.
pub fn write_tsv(path: &Path, ds: &Dataset, vocab: &Vocabulary) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for inst in ds.instances() {
        let mut line = inst.label.to_string();
        for (n, &v) in inst.values.iter().enumerate() {
            line.push('\t');
            line.push_str(vocab.token(n, v).unwrap_or(OOV_TOKEN));
        }
        line.push('\n');
        out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvfs_core::data::{InformativeField, SyntheticMode, SyntheticSpec};

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn two_line_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.tsv", "1\ta\tb\n0\ta\tc\n");
        let (ds, vocab) = read_tsv(&p, None, 1).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.field_count(), 2);
        assert_eq!(ds.labels(), vec![1.0, 0.0]);
        assert_eq!(vocab.encode(0, "a"), 1);

        let q = write(dir.path(), "b.tsv", "1\ta\tzzz\n");
        let (ds, _) = read_tsv(&q, Some(&vocab), 1).unwrap();
        assert_eq!(ds.instances()[0].values, vec![1, 0]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.tsv", "1\ta\tb\n0\ta\n");
        let msg = read_tsv(&p, None, 1).unwrap_err().to_string();
        assert!(msg.contains("a.tsv:2"), "{msg}");
        let p = write(dir.path(), "b.tsv", "1\ta\n\n2\tb\n");
        let msg = read_tsv(&p, None, 1).unwrap_err().to_string();
        assert!(msg.contains("b.tsv:3") && msg.contains("label"), "{msg}");
        assert!(read_tsv(&dir.path().join("missing.tsv"), None, 1).is_err());
        let p = write(dir.path(), "c.tsv", "");
        assert!(read_tsv(&p, None, 1).is_err());
    }

    #[test]
    fn generated_dataset_round_trips() {
        let spec = SyntheticSpec {
            cardinalities: vec![3, 7, 4],
            mode_field: 2,
            modes: vec![SyntheticMode {
                selector_values: vec![1, 2, 3, 4],
                informative: vec![InformativeField {
                    field: 1,
                    logits: vec![1.0, -1.0, 0.5, 0.0, 2.0, -2.0, 0.3],
                }],
            }],
            mode_field_weights: None,
            label_noise: 0.1,
            seed: 5,
        };
        let (ds, _) = spec.generate(500).unwrap();
        let vocab = spec.vocabulary();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.tsv");
        write_tsv(&p, &ds, &vocab).unwrap();
        let (back, _) = read_tsv(&p, Some(&vocab), 1).unwrap();
        assert_eq!(back, ds);
    }
}
