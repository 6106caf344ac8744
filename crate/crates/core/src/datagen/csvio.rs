use std::fs::File;
use std::path::Path;

use super::{DataError, Dataset, Provenance, Split, Variable};

/// Expected columns of a CSV file, with descriptions the file cannot carry.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub variables: Vec<Variable>,
    pub target: Variable,
}

const SPLIT_COLUMN: &str = "split";

/// Writes `variables..., target, split` with round-trip precision.
pub fn save_csv(d: &Dataset, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let mut w = csv::Writer::from_writer(file);
    let mut header: Vec<&str> = d.variable_names();
    header.push(&d.target().name);
    header.push(SPLIT_COLUMN);
    w.write_record(&header)?;
    for i in 0..d.len() {
        let mut rec: Vec<String> = d.columns().iter().map(|c| format!("{:e}", c[i])).collect();
        rec.push(format!("{:e}", d.targets()[i]));
        rec.push(d.splits()[i].as_str().to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    Ok(())
}

/// Reads a CSV written by [`save_csv`] or a plain table without a `split`
/// column. Returns the dataset and whether split tags were present; untagged
/// rows default to [`Split::Train`].
///
/// Without a schema, the last non-split column is the target.
pub(crate) fn read_table(path: &Path, schema: Option<&Schema>) -> Result<(Dataset, bool), DataError> {
    let file = File::open(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let split_at = header.iter().position(|h| h == SPLIT_COLUMN);
    let numeric: Vec<usize> = (0..header.len()).filter(|&i| Some(i) != split_at).collect();
    if numeric.len() < 2 {
        return Err(DataError::Malformed {
            line: 1,
            msg: "need at least one variable column and a target column".into(),
        });
    }

    let (variables, target) = match schema {
        Some(s) => {
            let expected: Vec<&str> =
                s.variables.iter().map(|v| v.name.as_str()).chain([s.target.name.as_str()]).collect();
            let found: Vec<&str> = numeric.iter().map(|&i| header[i].as_str()).collect();
            if expected != found {
                return Err(DataError::Malformed {
                    line: 1,
                    msg: format!("expected columns {expected:?}, found {found:?}"),
                });
            }
            (s.variables.clone(), s.target.clone())
        }
        None => {
            let (last, rest) = numeric.split_last().expect("checked length");
            (rest.iter().map(|&i| Variable::new(&header[i], "", "")).collect(), Variable::new(&header[*last], "", ""))
        }
    };

    let nvars = variables.len();
    let mut cols = vec![Vec::new(); nvars];
    let mut y = Vec::new();
    let mut split = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        for (j, &ci) in numeric.iter().enumerate() {
            let raw = rec.get(ci).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| DataError::Malformed {
                line,
                msg: format!("`{raw}` in column `{}` is not a number", header[ci]),
            })?;
            if j < nvars {
                cols[j].push(v);
            } else {
                y.push(v);
            }
        }
        split.push(match split_at {
            Some(si) => rec.get(si).unwrap_or("").parse().map_err(|msg| DataError::Malformed { line, msg })?,
            None => Split::Train,
        });
    }
    let d = Dataset::new(variables, target, cols, y, split, Provenance::default())?;
    Ok((d, split_at.is_some()))
}

pub fn load_csv(path: &Path, schema: Option<&Schema>) -> Result<Dataset, DataError> {
    let (mut d, _) = read_table(path, schema)?;
    d.provenance.config = path.display().to_string();
    Ok(d)
}
