//! Task corpora as UTF-8 TSV: `sentence`, `sentence2` (may be empty) and
//! `label`, with a header row.

use std::fs;
use std::path::Path;

use eqspike_core::model::TaskHead;
use eqspike_core::train::{Example, Label, TaskSpec};

use crate::error::{CliError, CliResult};
use crate::fsio::write_atomic;

pub const HEADER: &str = "sentence\tsentence2\tlabel";

fn format_label(label: Label) -> String {
    match label {
        Label::Class(c) => c.to_string(),
        Label::Score(s) => format!("{s:?}"),
    }
}

pub fn to_tsv(examples: &[Example]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for e in examples {
        out.push_str(&e.sentence);
        out.push('\t');
        out.push_str(e.sentence2.as_deref().unwrap_or(""));
        out.push('\t');
        out.push_str(&format_label(e.label));
        out.push('\n');
    }
    out
}

pub fn write_tsv(path: &Path, examples: &[Example]) -> CliResult<()> {
    write_atomic(path, to_tsv(examples).as_bytes())
}

/// Parses TSV text into examples tokenized for `spec`.
pub fn parse_tsv(path: &Path, text: &str, spec: &TaskSpec) -> CliResult<Vec<Example>> {
    let vocab = spec.vocabulary()?;
    let head = spec.head();
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end_matches('\r') == HEADER => {}
        _ => return Err(CliError::format(path, format!("missing header `{HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let row = i + 2;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CliError::format(path, format!("line {row}: expected 3 fields, found {}", fields.len())));
        }
        let bad = |m: String| CliError::format(path, format!("line {row}: {m}"));
        let label = match head {
            TaskHead::Classification { classes } => {
                let c: usize = fields[2].parse().map_err(|_| bad(format!("label `{}` is not a class index", fields[2])))?;
                if c >= classes {
                    return Err(bad(format!("label {c} outside {classes} classes")));
                }
                Label::Class(c)
            }
            TaskHead::Regression => {
                let s: f64 = fields[2].parse().map_err(|_| bad(format!("label `{}` is not a number", fields[2])))?;
                if !s.is_finite() {
                    return Err(bad("label is not finite".into()));
                }
                Label::Score(s)
            }
        };
        let sentence2 = (!fields[1].is_empty()).then(|| fields[1].to_string());
        let tokens = vocab
            .encode(fields[0], sentence2.as_deref(), spec.seq_len)
            .map_err(|e| bad(e.to_string()))?;
        out.push(Example {
            sentence: fields[0].to_string(),
            sentence2,
            tokens,
            label,
        });
    }
    Ok(out)
}

pub fn read_tsv(path: &Path, spec: &TaskSpec) -> CliResult<Vec<Example>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_tsv(path, &text, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn roundtrip_generated_sets() {
        for spec in [TaskSpec::majority(), TaskSpec::similarity()] {
            let data = spec.generate(&mut rand_chacha::ChaCha8Rng::seed_from_u64(3)).unwrap();
            let text = to_tsv(&data.train);
            assert_eq!(parse_tsv(Path::new("x"), &text, &spec).unwrap(), data.train);
        }
    }

    #[test]
    fn rejects_bad_rows() {
        let spec = TaskSpec::majority();
        let p = Path::new("x.tsv");
        assert!(parse_tsv(p, "a\tb\n", &spec).is_err());
        assert!(parse_tsv(p, &format!("{HEADER}\naab\t\t5\n"), &spec).is_err());
        assert!(parse_tsv(p, &format!("{HEADER}\naxb\t\t1\n"), &spec).is_err());
        assert!(parse_tsv(p, &format!("{HEADER}\naab\t1\n"), &spec).is_err());
        assert_eq!(parse_tsv(p, &format!("{HEADER}\naab\t\t1\n\n"), &spec).unwrap().len(), 1);
    }
}
