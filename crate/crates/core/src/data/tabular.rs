use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Result, TsnetError};

/// One target column or several.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TargetSpec {
    One(String),
    Many(Vec<String>),
}

impl TargetSpec {
    pub fn columns(&self) -> Vec<String> {
        match self {
            TargetSpec::One(c) => vec![c.clone()],
            TargetSpec::Many(cs) => cs.clone(),
        }
    }
}

/// Column roles and preprocessing for a CSV file. Every column that is not
/// a target and not dropped is a feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub target: TargetSpec,
    /// Column -> (label -> numeric code), e.g. `month: {jan: 1, ...}`.
    #[serde(default)]
    pub categorical_maps: BTreeMap<String, BTreeMap<String, f64>>,
    /// Columns passed through `log1p` before standardization.
    #[serde(default)]
    pub log_columns: Vec<String>,
    #[serde(default)]
    pub drop_columns: Vec<String>,
}

impl CsvSchema {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TsnetError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| TsnetError::Schema(format!("{}: {e}", path.display())))
    }
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "?" | "NA" | "na" | "NaN" | "nan")
}

/// Reads a comma-separated file with a header row. Categorical columns are
/// mapped to codes and `log1p` is applied to the listed columns; rows with
/// an empty or missing-marker cell are dropped and counted in the
/// transform log. Standardization happens later, on training-split
/// statistics ([`Dataset::standardize`]).
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| TsnetError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();

    let targets = schema.target.columns();
    let named = targets
        .iter()
        .chain(&schema.log_columns)
        .chain(&schema.drop_columns)
        .chain(schema.categorical_maps.keys());
    for c in named {
        if !headers.contains(c) {
            return Err(TsnetError::Schema(format!("column '{c}' not found in {}", path.display())));
        }
    }
    if targets.is_empty() {
        return Err(TsnetError::Schema("no target column".into()));
    }
    let features: Vec<String> = headers
        .iter()
        .filter(|h| !targets.contains(h) && !schema.drop_columns.contains(h))
        .cloned()
        .collect();
    let col_of = |name: &String| headers.iter().position(|h| h == name).expect("checked");
    let feat_idx: Vec<usize> = features.iter().map(col_of).collect();
    let targ_idx: Vec<usize> = targets.iter().map(col_of).collect();

    let (mut xs, mut ys, mut rows, mut rejected) = (Vec::new(), Vec::new(), 0usize, 0usize);
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let needed = feat_idx.iter().chain(&targ_idx);
        if needed.clone().any(|&c| rec.get(c).is_none_or(is_missing)) {
            rejected += 1;
            continue;
        }
        let parse = |c: usize| -> Result<f64> {
            let name = &headers[c];
            let cell = rec.get(c).expect("checked");
            let v = match schema.categorical_maps.get(name) {
                Some(map) => *map.get(cell).ok_or_else(|| TsnetError::Parse {
                    row,
                    column: name.clone(),
                    detail: format!("unknown category '{cell}'"),
                })?,
                None => cell.parse::<f64>().map_err(|e| TsnetError::Parse {
                    row,
                    column: name.clone(),
                    detail: format!("'{cell}': {e}"),
                })?,
            };
            if !v.is_finite() {
                return Err(TsnetError::Parse {
                    row,
                    column: name.clone(),
                    detail: "non-finite value".into(),
                });
            }
            if schema.log_columns.contains(name) {
                if v <= -1.0 {
                    return Err(TsnetError::Parse {
                        row,
                        column: name.clone(),
                        detail: format!("log1p of {v}"),
                    });
                }
                return Ok(v.ln_1p());
            }
            Ok(v)
        };
        for &c in &feat_idx {
            xs.push(parse(c)?);
        }
        for &c in &targ_idx {
            ys.push(parse(c)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(TsnetError::Schema(format!("{} has no usable rows", path.display())));
    }
    let x = Array2::from_shape_vec((rows, features.len()), xs).expect("row-major");
    let y = Array2::from_shape_vec((rows, targets.len()), ys).expect("row-major");
    let mut ds = Dataset::new(x, y, features, targets)?;
    for col in ds
        .transform_log
        .features
        .iter_mut()
        .chain(ds.transform_log.targets.iter_mut())
    {
        col.log1p = schema.log_columns.contains(&col.name);
    }
    ds.transform_log.rejected_rows = rejected;
    Ok(ds)
}

/// Reads the named numeric columns, in the given order, from a CSV file
/// with a header row. Other columns are ignored; a missing or unparsable
/// cell is an error.
pub fn load_feature_csv(path: &Path, names: &[String]) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| TsnetError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let idx = names
        .iter()
        .map(|n| {
            headers
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| TsnetError::Schema(format!("column '{n}' not found in {}", path.display())))
        })
        .collect::<Result<Vec<usize>>>()?;
    let mut vals = Vec::new();
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (&c, name) in idx.iter().zip(names) {
            let cell = rec.get(c).unwrap_or("");
            let v = cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| TsnetError::Parse {
                row: r + 1,
                column: name.clone(),
                detail: format!("'{cell}' is not a finite number"),
            })?;
            vals.push(v);
        }
        rows += 1;
    }
    Ok(Array2::from_shape_vec((rows, names.len()), vals).expect("row-major"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(s: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(s.as_bytes()).unwrap();
        f
    }

    fn schema(target: &str) -> CsvSchema {
        CsvSchema {
            target: TargetSpec::One(target.into()),
            categorical_maps: BTreeMap::new(),
            log_columns: vec![],
            drop_columns: vec![],
        }
    }

    #[test]
    fn categorical_and_log() {
        let f = write("month,rain,area\njan,0,0\nfeb,1.5,3\n,2,2\n");
        let mut s = schema("area");
        s.categorical_maps
            .insert("month".into(), [("jan".into(), 1.0), ("feb".into(), 2.0)].into());
        s.log_columns = vec!["rain".into(), "area".into()];
        let d = load_csv(f.path(), &s).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.transform_log.rejected_rows, 1);
        assert_eq!(d.x[[0, 1]], 0.0);
        assert_eq!(d.x[[1, 0]], 2.0);
        assert!((d.y[[1, 0]] - 3f64.ln_1p()).abs() < 1e-15);
        assert!(d.transform_log.targets[0].log1p);
    }

    #[test]
    fn feature_table_by_name() {
        let f = write("b,a,c\n1,2,3\n4,5,6\n");
        let x = load_feature_csv(f.path(), &["a".into(), "b".into()]).unwrap();
        assert_eq!(x, ndarray::array![[2.0, 1.0], [5.0, 4.0]]);
        assert!(matches!(load_feature_csv(f.path(), &["z".into()]), Err(TsnetError::Schema(_))));
        let g = write("a\n1\nx\n");
        assert!(matches!(load_feature_csv(g.path(), &["a".into()]), Err(TsnetError::Parse { row: 2, .. })));
    }

    #[test]
    fn errors_name_location() {
        let f = write("a,b\n1,2\n3,x\n");
        match load_csv(f.path(), &schema("b")) {
            Err(TsnetError::Parse { row, column, .. }) => assert_eq!((row, column.as_str()), (2, "b")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_csv(f.path(), &schema("zzz")), Err(TsnetError::Schema(_))));
    }

    #[test]
    fn schema_json() {
        let s: CsvSchema = serde_json::from_str(
            r#"{"target": "y", "categorical_maps": {"day": {"mon": 1}}, "log_columns": ["r"]}"#,
        )
        .unwrap();
        assert_eq!(s.target.columns(), vec!["y".to_string()]);
        assert!(serde_json::from_str::<CsvSchema>(r#"{"target": "y", "bogus": 1}"#).is_err());
    }
}
