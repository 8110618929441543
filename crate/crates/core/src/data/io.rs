//! Dataset files: one JSON patient object per line, or a wide CSV with one
//! row per visit. Both start with a line carrying the `ppn-data-v1` tag.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PatientRecord};
use crate::error::{PpnError, Result};

pub const DATA_FORMAT_TAG: &str = "ppn-data-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl DataFormat {
    /// Picks the format from the file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Jsonl,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonlHeader {
    format: String,
    indicators: Vec<String>,
    statics: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireVisit {
    /// One entry per indicator; `null` marks an unobserved cell.
    pub values: Vec<Option<f64>>,
    /// Defaults to "observed wherever a value is present".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<bool>>,
}

/// JSON shape of a patient, shared by dataset lines and the HTTP API.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRecord {
    pub id: String,
    pub visits: Vec<WireVisit>,
    #[serde(rename = "static")]
    pub statics: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subtype: Option<usize>,
}

impl WireRecord {
    pub fn from_record(r: &PatientRecord) -> Self {
        let visits = (0..r.n_visits())
            .map(|t| WireVisit {
                values: (0..r.n_indicators()).map(|n| r.value(t, n)).collect(),
                mask: Some((0..r.n_indicators()).map(|n| r.observed(t, n)).collect()),
            })
            .collect();
        Self {
            id: r.id.clone(),
            visits,
            statics: r.statics.clone(),
            label: Some(r.label),
            subtype: r.subtype,
        }
    }

    /// Converts to a record, checking every field. Error messages name the
    /// offending field path (`visits[3].mask[1]`).
    pub fn into_record(self, require_label: bool) -> Result<PatientRecord> {
        let id = self.id;
        if self.visits.is_empty() {
            return Err(PpnError::ingest(&id, "visits: patient has no visits (T = 0)"));
        }
        let n = self.visits[0].values.len();
        let mut cells = Vec::with_capacity(self.visits.len());
        for (t, v) in self.visits.into_iter().enumerate() {
            if v.values.len() != n {
                return Err(PpnError::ingest(
                    &id,
                    format!("visits[{t}].values: {} entries, expected {n}", v.values.len()),
                ));
            }
            let mask = v.mask.unwrap_or_else(|| v.values.iter().map(Option::is_some).collect());
            if mask.len() != n {
                return Err(PpnError::ingest(
                    &id,
                    format!("visits[{t}].mask: {} entries, expected {n}", mask.len()),
                ));
            }
            let mut row = Vec::with_capacity(n);
            for (i, (value, observed)) in v.values.into_iter().zip(mask).enumerate() {
                match (value, observed) {
                    (Some(x), true) if x.is_finite() => row.push(Some(x)),
                    (Some(x), true) => {
                        return Err(PpnError::ingest(
                            &id,
                            format!("visits[{t}].values[{i}]: non-finite value {x}"),
                        ))
                    }
                    (None, true) => {
                        return Err(PpnError::ingest(
                            &id,
                            format!("visits[{t}].values[{i}]: null value marked observed"),
                        ))
                    }
                    (_, false) => row.push(None),
                }
            }
            cells.push(row);
        }
        let label = match (self.label, require_label) {
            (Some(l), _) if l <= 1 => l,
            (Some(l), _) => return Err(PpnError::ingest(&id, format!("label: {l} is not binary"))),
            (None, true) => return Err(PpnError::ingest(&id, "label: missing")),
            (None, false) => 0,
        };
        let mut rec = PatientRecord::from_visits(id, &cells, self.statics, label)?;
        rec.subtype = self.subtype;
        Ok(rec)
    }
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    match format {
        DataFormat::Jsonl => load_jsonl(reader),
        DataFormat::Csv => load_csv(reader),
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path, format: DataFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        DataFormat::Jsonl => write_jsonl(ds, &mut w)?,
        DataFormat::Csv => write_csv(ds, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

fn load_jsonl(reader: impl BufRead) -> Result<Dataset> {
    let mut lines = reader.lines().enumerate();
    let header: JsonlHeader = loop {
        let Some((i, line)) = lines.next() else {
            return Err(PpnError::ingest("line 1", "empty file"));
        };
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        break serde_json::from_str(&line)
            .map_err(|e| PpnError::ingest(format!("line {}", i + 1), format!("bad header: {e}")))?;
    };
    if header.format != DATA_FORMAT_TAG {
        return Err(PpnError::ingest(
            "header",
            format!("format `{}`, expected `{DATA_FORMAT_TAG}`", header.format),
        ));
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireRecord = serde_json::from_str(&line)
            .map_err(|e| PpnError::ingest(format!("line {}", i + 1), e.to_string()))?;
        records.push(wire.into_record(true)?);
    }
    Dataset::new(records, header.indicators, header.statics)
}

fn write_jsonl(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    let header = JsonlHeader {
        format: DATA_FORMAT_TAG.to_string(),
        indicators: ds.indicator_names.clone(),
        statics: ds.static_names.clone(),
    };
    serde_json::to_writer(&mut *w, &header)?;
    writeln!(w)?;
    for r in &ds.records {
        serde_json::to_writer(&mut *w, &WireRecord::from_record(r))?;
        writeln!(w)?;
    }
    Ok(())
}

/// Parses `# ppn-data-v1 indicators=N statics=M`.
fn parse_csv_tag(line: &str) -> Result<(usize, usize)> {
    let bad = || PpnError::ingest("line 1", format!("expected `# {DATA_FORMAT_TAG} indicators=N statics=M`, got `{line}`"));
    let mut parts = line.trim().trim_start_matches('#').split_whitespace();
    if parts.next() != Some(DATA_FORMAT_TAG) {
        return Err(bad());
    }
    let (mut n, mut m) = (None, None);
    for p in parts {
        match p.split_once('=') {
            Some(("indicators", v)) => n = v.parse().ok(),
            Some(("statics", v)) => m = v.parse().ok(),
            _ => return Err(bad()),
        }
    }
    n.zip(m).ok_or_else(bad)
}

fn load_csv(mut reader: impl BufRead) -> Result<Dataset> {
    let mut tag = String::new();
    reader.read_line(&mut tag)?;
    let (n, m) = parse_csv_tag(&tag)?;

    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() != 3 + n + m {
        return Err(PpnError::ingest(
            "header",
            format!("{} columns, expected {} for {n} indicators and {m} statics", headers.len(), 3 + n + m),
        ));
    }
    if &headers[0] != "patient_id" || &headers[1] != "visit_idx" || &headers[2 + n + m] != "label" {
        return Err(PpnError::ingest("header", "columns must be patient_id, visit_idx, indicators..., statics..., label"));
    }
    let indicator_names = headers.iter().skip(2).take(n).map(str::to_string).collect();
    let static_names = headers.iter().skip(2 + n).take(m).map(str::to_string).collect();

    struct Pending {
        visits: Vec<(usize, Vec<Option<f64>>)>,
        statics: Vec<f64>,
        label: u8,
    }
    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, Pending> = HashMap::new();
    let parse = |id: &str, col: &str, s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| PpnError::ingest(id, format!("column {col}: `{s}` is not a finite number")))
    };

    for (line, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| PpnError::ingest(format!("data row {}", line + 1), e.to_string()))?;
        let id = row.get(0).unwrap_or_default().to_string();
        if row.len() != 3 + n + m {
            return Err(PpnError::ingest(&id, format!("{} columns, expected {}", row.len(), 3 + n + m)));
        }
        let visit: usize = row[1]
            .trim()
            .parse()
            .map_err(|_| PpnError::ingest(&id, format!("visit_idx `{}` is not a non-negative integer", &row[1])))?;
        let mut values = Vec::with_capacity(n);
        for k in 0..n {
            let cell = row[2 + k].trim();
            values.push(if cell.is_empty() { None } else { Some(parse(&id, &headers[2 + k], cell)?) });
        }
        let statics = (0..m)
            .map(|k| parse(&id, &headers[2 + n + k], &row[2 + n + k]))
            .collect::<Result<Vec<_>>>()?;
        let label = match row[2 + n + m].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(PpnError::ingest(&id, format!("label `{other}` is not binary"))),
        };
        match pending.get_mut(&id) {
            Some(p) => {
                if p.statics != statics || p.label != label {
                    return Err(PpnError::ingest(&id, "static values or label differ between visits"));
                }
                p.visits.push((visit, values));
            }
            None => {
                order.push(id.clone());
                pending.insert(id, Pending { visits: vec![(visit, values)], statics, label });
            }
        }
    }

    let mut records = Vec::with_capacity(order.len());
    for id in order {
        let mut p = pending.remove(&id).expect("recorded id");
        p.visits.sort_by_key(|(t, _)| *t);
        if p.visits.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(PpnError::ingest(&id, "duplicate visit_idx"));
        }
        let cells: Vec<_> = p.visits.into_iter().map(|(_, v)| v).collect();
        records.push(PatientRecord::from_visits(id, &cells, p.statics, p.label)?);
    }
    Dataset::new(records, indicator_names, static_names)
}

fn write_csv(ds: &Dataset, w: &mut impl Write) -> Result<()> {
    writeln!(
        w,
        "# {DATA_FORMAT_TAG} indicators={} statics={}",
        ds.n_indicators(),
        ds.n_statics()
    )?;
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["patient_id".to_string(), "visit_idx".to_string()];
    header.extend(ds.indicator_names.iter().cloned());
    header.extend(ds.static_names.iter().cloned());
    header.push("label".into());
    wtr.write_record(&header)?;
    for r in &ds.records {
        for t in 0..r.n_visits() {
            let mut row = vec![r.id.clone(), t.to_string()];
            row.extend((0..r.n_indicators()).map(|k| r.value(t, k).map_or(String::new(), |v| format!("{v:?}"))));
            row.extend(r.statics.iter().map(|s| format!("{s:?}")));
            row.push(r.label.to_string());
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        let a = PatientRecord::from_visits(
            "a",
            &[vec![Some(1.5), None], vec![Some(-2.0), Some(0.1)], vec![None, None]],
            vec![63.0],
            1,
        )
        .unwrap();
        let b = PatientRecord::from_visits("b", &[vec![Some(0.3), Some(1e-9)]], vec![41.5], 0).unwrap();
        Dataset::new(vec![a, b], vec!["x".into(), "y".into()], vec!["age".into()]).unwrap()
    }

    #[test]
    fn round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample();
        for (name, fmt) in [("d.jsonl", DataFormat::Jsonl), ("d.csv", DataFormat::Csv)] {
            let path = dir.path().join(name);
            save_dataset(&ds, &path, fmt).unwrap();
            assert_eq!(DataFormat::from_path(&path), fmt);
            let back = load_dataset(&path, fmt).unwrap();
            assert_eq!(back, ds, "{name}");
            let lens: Vec<_> = back.records.iter().map(|r| r.n_visits()).collect();
            assert_eq!(lens, vec![3, 1]);
        }
    }

    #[test]
    fn csv_empty_cell_is_unobserved() {
        let text = "# ppn-data-v1 indicators=2 statics=0\npatient_id,visit_idx,x,y,label\np,0,1.0,,0\np,1,,2.5,0\n";
        let ds = load_csv(text.as_bytes()).unwrap();
        let r = &ds.records[0];
        assert_eq!((r.value(0, 0), r.value(0, 1)), (Some(1.0), None));
        assert_eq!((r.value(1, 0), r.value(1, 1)), (None, Some(2.5)));
    }

    #[test]
    fn csv_errors_name_the_record() {
        let bad_label = "# ppn-data-v1 indicators=1 statics=0\npatient_id,visit_idx,x,label\nq9,0,1.0,2\n";
        let err = load_csv(bad_label.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("q9") && err.contains("binary"), "{err}");

        let ragged = "# ppn-data-v1 indicators=1 statics=0\npatient_id,visit_idx,x,label\nr1,0,1.0\n";
        let err = load_csv(ragged.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("data row 1") || err.contains("r1"), "{err}");

        let untagged = "patient_id,visit_idx,x,label\n";
        assert!(load_csv(untagged.as_bytes()).is_err());
    }

    #[test]
    fn jsonl_errors_name_the_record() {
        let t0 = "{\"format\":\"ppn-data-v1\",\"indicators\":[\"x\"],\"statics\":[]}\n{\"id\":\"z1\",\"visits\":[],\"static\":[],\"label\":0}\n";
        let err = load_jsonl(t0.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("z1") && err.contains("T = 0"), "{err}");

        let lbl = "{\"format\":\"ppn-data-v1\",\"indicators\":[\"x\"],\"statics\":[]}\n{\"id\":\"z2\",\"visits\":[{\"values\":[1.0]}],\"static\":[],\"label\":3}\n";
        let err = load_jsonl(lbl.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("z2") && err.contains("binary"), "{err}");

        let width = "{\"format\":\"ppn-data-v1\",\"indicators\":[\"x\",\"y\"],\"statics\":[]}\n{\"id\":\"z3\",\"visits\":[{\"values\":[1.0]}],\"static\":[],\"label\":0}\n";
        let err = load_jsonl(width.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("z3"), "{err}");
    }

    #[test]
    fn wire_mask_conflicts_are_field_level() {
        let w: WireRecord = serde_json::from_str(
            r#"{"id":"p","visits":[{"values":[1.0,null],"mask":[true,true]}],"static":[]}"#,
        )
        .unwrap();
        let err = w.into_record(false).unwrap_err().to_string();
        assert!(err.contains("visits[0].values[1]"), "{err}");
    }
}
