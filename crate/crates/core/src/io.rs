//! Measurement CSV files, bundled case-study fixtures and atomic JSON
//! persistence.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{Dataset, Record};
use crate::model::{InputPoint, UnweightedDesign};
use crate::vle::{AntoineParams, BinarySystem, ParamVector};

pub const CSV_HEADER: [&str; 9] = [
    "design_label",
    "l_planned",
    "l_actual",
    "P_planned",
    "P_actual",
    "v",
    "T",
    "sigma_v",
    "sigma_T",
];

/// One row of a measurement table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub design_label: String,
    pub l_planned: f64,
    pub l_actual: f64,
    #[serde(rename = "P_planned")]
    pub p_planned: f64,
    #[serde(rename = "P_actual")]
    pub p_actual: f64,
    pub v: f64,
    #[serde(rename = "T")]
    pub t: f64,
    pub sigma_v: f64,
    #[serde(rename = "sigma_T")]
    pub sigma_t: f64,
}

impl MeasurementRecord {
    pub fn planned(&self) -> InputPoint {
        InputPoint::new(vec![self.l_planned, self.p_planned])
    }

    pub fn actual(&self) -> InputPoint {
        InputPoint::new(vec![self.l_actual, self.p_actual])
    }

    /// Checks finiteness, mole-fraction bounds and positivity; `row` is used
    /// for error reporting only.
    pub fn validate(&self, row: usize) -> Result<()> {
        let fields = [
            ("l_planned", self.l_planned),
            ("l_actual", self.l_actual),
            ("P_planned", self.p_planned),
            ("P_actual", self.p_actual),
            ("v", self.v),
            ("T", self.t),
            ("sigma_v", self.sigma_v),
            ("sigma_T", self.sigma_t),
        ];
        for (name, value) in fields {
            let err = |message: &str| Error::Parse {
                row,
                column: name.to_string(),
                message: message.to_string(),
            };
            if !value.is_finite() {
                return Err(err("value is not finite"));
            }
            match name {
                "l_planned" | "l_actual" | "v" if !(0.0..=1.0).contains(&value) => {
                    return Err(err(&format!("mole fraction {value} outside [0, 1]")));
                }
                "P_planned" | "P_actual" | "T" if value <= 0.0 => {
                    return Err(err(&format!("{value} must be positive")));
                }
                "sigma_v" | "sigma_T" if value < 0.0 => {
                    return Err(err(&format!("{value} must be nonnegative")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn parse_csv<R: Read>(reader: R) -> Result<Vec<MeasurementRecord>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.is_empty() || header.len() == 1 && header[0].is_empty() {
        return Err(Error::Parse {
            row: 0,
            column: String::new(),
            message: "missing header row".into(),
        });
    }
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse {
            row: 0,
            column: String::new(),
            message: format!("header must be `{}`", CSV_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", CSV_HEADER.len(), rec.len()),
            });
        }
        let num = |k: usize| -> Result<f64> {
            rec[k].trim().parse::<f64>().map_err(|_| Error::Parse {
                row,
                column: CSV_HEADER[k].to_string(),
                message: format!("`{}` is not a number", &rec[k]),
            })
        };
        let m = MeasurementRecord {
            design_label: rec[0].to_string(),
            l_planned: num(1)?,
            l_actual: num(2)?,
            p_planned: num(3)?,
            p_actual: num(4)?,
            v: num(5)?,
            t: num(6)?,
            sigma_v: num(7)?,
            sigma_t: num(8)?,
        };
        m.validate(row)?;
        out.push(m);
    }
    if out.is_empty() {
        return Err(Error::Parse {
            row: 1,
            column: String::new(),
            message: "no measurement rows".into(),
        });
    }
    Ok(out)
}

/// Parses measurement rows from CSV text with the mandatory header.
pub fn read_measurements(text: &str) -> Result<Vec<MeasurementRecord>> {
    if text.trim().is_empty() {
        return Err(Error::Parse {
            row: 0,
            column: String::new(),
            message: "empty input".into(),
        });
    }
    parse_csv(text.as_bytes())
}

/// Loads a CSV file, or a bundled fixture when `source` names one.
pub fn load_measurements(source: &str) -> Result<Vec<MeasurementRecord>> {
    if let Ok(rows) = fixture(source) {
        return Ok(rows);
    }
    let path = Path::new(source);
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_measurements(&text)
}

/// Serializes rows with the canonical header, shortest round-trip number
/// formatting and `\n` line endings.
pub fn write_measurements(rows: &[MeasurementRecord]) -> String {
    let mut out = CSV_HEADER.join(",");
    out.push('\n');
    for r in rows {
        let fields = [
            r.l_planned, r.l_actual, r.p_planned, r.p_actual, r.v, r.t, r.sigma_v, r.sigma_t,
        ];
        out.push_str(&escape(&r.design_label));
        for f in fields {
            out.push(',');
            out.push_str(&f.to_string());
        }
        out.push('\n');
    }
    out
}

fn escape(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Header of a planned-design table.
pub const DESIGN_HEADER: [&str; 2] = ["l", "P"];

/// Parses a list of planned points `(l, P)` with header `l,P`.
pub fn read_design(text: &str) -> Result<UnweightedDesign> {
    let parse_err = |row: usize, column: &str, message: String| Error::Parse {
        row,
        column: column.to_string(),
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    if header.iter().ne(DESIGN_HEADER.iter().copied()) {
        return Err(parse_err(0, "", format!("header must be `{}`", DESIGN_HEADER.join(","))));
    }
    let mut points = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let mut x = [0.0; 2];
        for (k, name) in DESIGN_HEADER.iter().enumerate() {
            let cell = rec.get(k).ok_or_else(|| parse_err(row, name, "missing field".into()))?;
            x[k] = cell
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(row, name, format!("`{cell}` is not a number")))?;
        }
        if !(0.0..=1.0).contains(&x[0]) {
            return Err(parse_err(row, "l", format!("mole fraction {} outside [0, 1]", x[0])));
        }
        if x[1] <= 0.0 {
            return Err(parse_err(row, "P", format!("{} must be positive", x[1])));
        }
        points.push(InputPoint::new(x.to_vec()));
    }
    if points.is_empty() {
        return Err(parse_err(1, "", "no design rows".into()));
    }
    Ok(UnweightedDesign::new(points))
}

pub fn write_design(design: &UnweightedDesign) -> String {
    let mut out = DESIGN_HEADER.join(",");
    out.push('\n');
    for x in &design.points {
        let c = x.coords();
        out.push_str(&format!("{},{}\n", c[0], c[1]));
    }
    out
}

/// Observations `(v, T)` at the actually realized inputs, keeping the planned
/// inputs alongside.
pub fn to_dataset(rows: &[MeasurementRecord]) -> Result<Dataset> {
    Dataset::new(
        rows.iter()
            .map(|r| Record {
                x: r.actual(),
                planned: Some(r.planned()),
                y: vec![r.v, r.t],
            })
            .collect(),
    )
}

pub fn actual_design(rows: &[MeasurementRecord]) -> UnweightedDesign {
    UnweightedDesign::new(rows.iter().map(MeasurementRecord::actual).collect())
}

pub fn planned_design(rows: &[MeasurementRecord]) -> UnweightedDesign {
    UnweightedDesign::new(rows.iter().map(MeasurementRecord::planned).collect())
}

const INIT_CSV: &str = include_str!("../fixtures/init.csv");
const FED_CSV: &str = include_str!("../fixtures/fed.csv");
const OED_CSV: &str = include_str!("../fixtures/oed.csv");
const ANTOINE_JSON: &str = include_str!("../fixtures/antoine.json");
const THETA_TOT_JSON: &str = include_str!("../fixtures/theta_tot.json");

/// Names accepted by [`fixture`].
pub const FIXTURES: [&str; 15] = [
    "init", "fed0", "fed0+", "fed1+", "fed2+", "fed1", "fed2", "fed3", "oed0+", "oed1+", "oed2+",
    "oed1", "oed2", "oed3", "tot",
];

fn labelled(csv: &str, label: &str) -> Vec<MeasurementRecord> {
    read_measurements(csv)
        .expect("bundled fixture parses")
        .into_iter()
        .filter(|r| r.design_label == label)
        .collect()
}

/// Bundled measurement tables of the propanol/propyl-acetate campaign.
///
/// `fed0` is the initial design without its sixth point; `fedk`/`oedk` are
/// the cumulative designs after `k` iterations and `tot` combines all data.
pub fn fixture(id: &str) -> Result<Vec<MeasurementRecord>> {
    let init = || read_measurements(INIT_CSV).expect("bundled fixture parses");
    let fed0 = || init().into_iter().take(5).collect::<Vec<_>>();
    let chain = |parts: Vec<Vec<MeasurementRecord>>| parts.into_iter().flatten().collect();
    let rows = match id {
        "init" => init(),
        "fed0" => fed0(),
        "fed0+" | "fed1+" | "fed2+" => labelled(FED_CSV, id),
        "oed0+" | "oed1+" | "oed2+" => labelled(OED_CSV, id),
        "fed1" => chain(vec![fed0(), labelled(FED_CSV, "fed0+")]),
        "fed2" => chain(vec![fixture("fed1")?, labelled(FED_CSV, "fed1+")]),
        "fed3" => chain(vec![fixture("fed2")?, labelled(FED_CSV, "fed2+")]),
        "oed1" => chain(vec![init(), labelled(OED_CSV, "oed0+")]),
        "oed2" => chain(vec![fixture("oed1")?, labelled(OED_CSV, "oed1+")]),
        "oed3" => chain(vec![fixture("oed2")?, labelled(OED_CSV, "oed2+")]),
        "tot" => chain(vec![
            fed0(),
            read_measurements(FED_CSV).expect("bundled fixture parses"),
            read_measurements(OED_CSV).expect("bundled fixture parses"),
        ]),
        _ => return Err(Error::UnknownFixture(id.to_string())),
    };
    Ok(rows)
}

#[derive(Deserialize)]
struct AntoineFile {
    components: [AntoineParams; 2],
}

/// Antoine coefficients of the two components as a JSON document.
pub fn antoine_fixture_json() -> &'static str {
    ANTOINE_JSON
}

pub fn parse_antoine(json: &str) -> Result<BinarySystem> {
    let f: AntoineFile = serde_json::from_str(json)?;
    let [a, b] = f.components;
    BinarySystem::new(a, b)
}

/// The all-data estimate shipped with the case study.
pub fn theta_tot_fixture() -> ParamVector {
    serde_json::from_str(THETA_TOT_JSON).expect("bundled fixture parses")
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes `value` as pretty JSON via a temporary file in the same directory
/// followed by a rename, so readers never observe a partial document.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{file_name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
