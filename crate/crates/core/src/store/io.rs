use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{EmbeddingRecord, Split, Store};
use crate::error::{Error, Result};

const CSV_FIXED_COLUMNS: [&str; 5] = ["id", "split", "label", "group_id", "ood_truth"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Jsonl,
    Csv,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Jsonl => "jsonl",
            Format::Csv => "csv",
        }
    }

    pub fn from_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()? {
            "jsonl" => Some(Format::Jsonl),
            "csv" => Some(Format::Csv),
            _ => None,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(Format::Jsonl),
            "csv" => Ok(Format::Csv),
            other => Err(Error::InvalidArgument(format!(
                "unknown store format `{other}`"
            ))),
        }
    }
}

/// 17 significant digits: enough for every `f64` to parse back bit-exactly.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Deserialize)]
struct JsonRecord {
    id: String,
    split: String,
    #[serde(default)]
    label: Option<i64>,
    vector: Vec<f64>,
    #[serde(default)]
    ood_truth: Option<bool>,
    #[serde(default)]
    group_id: Option<String>,
}

/// Checks a raw label against the split. Labels on unlabeled records are
/// dropped with a warning; missing labels elsewhere are errors.
fn reconcile_label(
    id: &str,
    split: Split,
    label: Option<i64>,
    location: &str,
    warnings: &mut Vec<String>,
) -> Result<Option<usize>> {
    let label = match label {
        Some(l) if l < 0 => {
            return Err(Error::Parse {
                location: location.to_string(),
                message: format!("record `{id}` has negative label {l}"),
            })
        }
        Some(l) => Some(l as usize),
        None => None,
    };
    match (split, label) {
        (Split::Unlabeled, Some(l)) => {
            let msg = format!("{location}: unlabeled record `{id}` carries label {l}; ignored");
            warn!("{msg}");
            warnings.push(msg);
            Ok(None)
        }
        (s, None) if s.requires_label() => Err(Error::Parse {
            location: location.to_string(),
            message: format!("{s} record `{id}` is missing its label"),
        }),
        (_, l) => Ok(l),
    }
}

/// Parses a store and returns it together with any non-fatal warnings.
pub fn read_store<R: BufRead>(reader: R, format: Format) -> Result<(Store, Vec<String>)> {
    let mut warnings = Vec::new();
    let records = match format {
        Format::Jsonl => read_jsonl(reader, &mut warnings)?,
        Format::Csv => read_csv(reader, &mut warnings)?,
    };
    Ok((Store::new(records)?, warnings))
}

fn read_jsonl<R: BufRead>(reader: R, warnings: &mut Vec<String>) -> Result<Vec<EmbeddingRecord>> {
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("line {}", n + 1);
        let raw: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            location: location.clone(),
            message: e.to_string(),
        })?;
        let split: Split = raw.split.parse().map_err(|_| Error::Parse {
            location: location.clone(),
            message: format!("record `{}` has unknown split `{}`", raw.id, raw.split),
        })?;
        let label = reconcile_label(&raw.id, split, raw.label, &location, warnings)?;
        records.push(EmbeddingRecord {
            id: raw.id,
            split,
            label,
            vector: raw.vector,
            ood_truth: raw.ood_truth,
            group_id: raw.group_id,
        });
    }
    Ok(records)
}

fn read_csv<R: BufRead>(reader: R, warnings: &mut Vec<String>) -> Result<Vec<EmbeddingRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < CSV_FIXED_COLUMNS.len()
        || headers.iter().zip(CSV_FIXED_COLUMNS).any(|(h, e)| h != e)
    {
        return Err(Error::Parse {
            location: "line 1".into(),
            message: format!(
                "expected header starting with {}",
                CSV_FIXED_COLUMNS.join(",")
            ),
        });
    }
    for (k, h) in headers.iter().skip(CSV_FIXED_COLUMNS.len()).enumerate() {
        if h != format!("v{k}") {
            return Err(Error::Parse {
                location: "line 1".into(),
                message: format!("expected column `v{k}`, found `{h}`"),
            });
        }
    }

    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let location = format!("line {line}");
        let id = row[0].to_string();
        let bad = |message: String| Error::Parse {
            location: location.clone(),
            message,
        };
        let split: Split = row[1]
            .parse()
            .map_err(|_| bad(format!("record `{id}` has unknown split `{}`", &row[1])))?;
        let label = match &row[2] {
            "" => None,
            s => Some(
                s.parse::<i64>()
                    .map_err(|_| bad(format!("record `{id}` has malformed label `{s}`")))?,
            ),
        };
        let label = reconcile_label(&id, split, label, &location, warnings)?;
        let group_id = match &row[3] {
            "" => None,
            s => Some(s.to_string()),
        };
        let ood_truth = match &row[4] {
            "" => None,
            "true" => Some(true),
            "false" => Some(false),
            s => return Err(bad(format!("record `{id}` has malformed ood_truth `{s}`"))),
        };
        let vector = row
            .iter()
            .skip(CSV_FIXED_COLUMNS.len())
            .enumerate()
            .map(|(k, s)| {
                s.parse::<f64>()
                    .map_err(|_| bad(format!("record `{id}` has malformed v{k} = `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(EmbeddingRecord {
            id,
            split,
            label,
            vector,
            ood_truth,
            group_id,
        });
    }
    Ok(records)
}

pub fn write_store<W: Write>(store: &Store, writer: W, format: Format) -> Result<()> {
    match format {
        Format::Jsonl => write_jsonl(store, writer),
        Format::Csv => write_csv(store, writer),
    }
}

fn write_jsonl<W: Write>(store: &Store, mut w: W) -> Result<()> {
    let mut line = String::new();
    for r in store.records() {
        line.clear();
        // serde_json only handles the string escaping; numbers are formatted
        // here so every vector component carries 17 significant digits.
        write!(
            line,
            "{{\"id\":{},\"split\":\"{}\",\"label\":{},\"vector\":[",
            serde_json::to_string(&r.id)?,
            r.split,
            r.label.map_or("null".to_string(), |l| l.to_string()),
        )
        .expect("write to String");
        for (k, v) in r.vector.iter().enumerate() {
            if k > 0 {
                line.push(',');
            }
            line.push_str(&fmt_f64(*v));
        }
        write!(
            line,
            "],\"ood_truth\":{},\"group_id\":{}}}",
            r.ood_truth.map_or("null".to_string(), |b| b.to_string()),
            match &r.group_id {
                Some(g) => serde_json::to_string(g)?,
                None => "null".to_string(),
            }
        )
        .expect("write to String");
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn write_csv<W: Write>(store: &Store, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = CSV_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..store.dim()).map(|k| format!("v{k}")));
    wtr.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for r in store.records() {
        row.clear();
        row.push(r.id.clone());
        row.push(r.split.to_string());
        row.push(r.label.map(|l| l.to_string()).unwrap_or_default());
        row.push(r.group_id.clone().unwrap_or_default());
        row.push(r.ood_truth.map(|b| b.to_string()).unwrap_or_default());
        row.extend(r.vector.iter().map(|&v| fmt_f64(v)));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Loads a store from disk, logging any warnings.
pub fn load_store(path: &Path, format: Format) -> Result<Store> {
    let file = File::open(path)?;
    let (store, _warnings) = read_store(BufReader::new(file), format)?;
    Ok(store)
}

pub fn save_store(store: &Store, path: &Path, format: Format) -> Result<()> {
    let file = File::create(path)?;
    write_store(store, BufWriter::new(file), format)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_store() -> Store {
        Store::new(vec![
            EmbeddingRecord {
                id: "a".into(),
                split: Split::Labeled,
                label: Some(1),
                vector: vec![0.1, -2.5],
                ood_truth: Some(false),
                group_id: Some("p1".into()),
            },
            EmbeddingRecord {
                id: "b \"quoted\", comma".into(),
                split: Split::Unlabeled,
                label: None,
                vector: vec![1e-300, std::f64::consts::PI],
                ood_truth: Some(true),
                group_id: None,
            },
            EmbeddingRecord {
                id: "c".into(),
                split: Split::Test,
                label: Some(0),
                vector: vec![-0.0, 123456789.12345679],
                ood_truth: None,
                group_id: Some("p2".into()),
            },
        ])
        .unwrap()
    }

    fn round_trip(store: &Store, format: Format) -> Store {
        let mut buf = Vec::new();
        write_store(store, &mut buf, format).unwrap();
        read_store(buf.as_slice(), format).unwrap().0
    }

    #[test]
    fn three_record_round_trip_both_formats() {
        let store = sample_store();
        for f in [Format::Jsonl, Format::Csv] {
            let back = round_trip(&store, f);
            assert_eq!(back.len(), 3);
            assert_eq!(back.dim(), 2);
            assert_eq!(back, store);
            assert_eq!(back.get("a").unwrap().group_id.as_deref(), Some("p1"));
        }
    }

    #[test]
    fn empty_store_writes_header_only() {
        let mut buf = Vec::new();
        write_store(&Store::empty(), &mut buf, Format::Csv).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "id,split,label,group_id,ood_truth\n"
        );
        let mut buf = Vec::new();
        write_store(&Store::empty(), &mut buf, Format::Jsonl).unwrap();
        assert!(buf.is_empty());
        assert!(read_store(&b""[..], Format::Jsonl).unwrap().0.is_empty());
    }

    #[test]
    fn dimension_mismatch_in_file() {
        let text = r#"{"id":"r1","split":"unlabeled","vector":[1,2]}
{"id":"r2","split":"unlabeled","vector":[1,2,3]}
"#;
        let err = read_store(text.as_bytes(), Format::Jsonl).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { ref id, .. } if id == "r2"));
    }

    #[test]
    fn stray_label_on_unlabeled_is_dropped_with_warning() {
        let text = r#"{"id":"r1","split":"unlabeled","label":3,"vector":[1,2]}"#;
        let (store, warnings) = read_store(text.as_bytes(), Format::Jsonl).unwrap();
        assert_eq!(store.get("r1").unwrap().label, None);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("r1"));

        let csv = "id,split,label,group_id,ood_truth,v0\nr1,unlabeled,2,,,0.5\n";
        let (store, warnings) = read_store(csv.as_bytes(), Format::Csv).unwrap();
        assert_eq!(store.get("r1").unwrap().label, None);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn malformed_line_is_named() {
        let text = "{\"id\":\"r1\",\"split\":\"unlabeled\",\"vector\":[1]}\n{not json}\n";
        match read_store(text.as_bytes(), Format::Jsonl).unwrap_err() {
            Error::Parse { location, .. } => assert_eq!(location, "line 2"),
            e => panic!("unexpected {e}"),
        }
        let csv = "id,split,label,group_id,ood_truth,v0\nr1,labeled,x,,,0.5\n";
        match read_store(csv.as_bytes(), Format::Csv).unwrap_err() {
            Error::Parse { location, message } => {
                assert_eq!(location, "line 2");
                assert!(message.contains("r1"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn duplicate_id_in_file() {
        let text = "{\"id\":\"r\",\"split\":\"unlabeled\",\"vector\":[1]}\n{\"id\":\"r\",\"split\":\"unlabeled\",\"vector\":[2]}\n";
        assert!(matches!(
            read_store(text.as_bytes(), Format::Jsonl).unwrap_err(),
            Error::DuplicateId(_)
        ));
    }

    #[test]
    fn missing_label_on_labeled_is_error() {
        let text = r#"{"id":"r1","split":"labeled","vector":[1]}"#;
        assert!(matches!(
            read_store(text.as_bytes(), Format::Jsonl).unwrap_err(),
            Error::Parse { .. }
        ));
    }

    fn arb_record(dim: usize) -> impl Strategy<Value = EmbeddingRecord> {
        (
            prop::sample::select(Split::ALL.to_vec()),
            0usize..7,
            prop::collection::vec(
                prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO,
                dim,
            ),
            prop::option::of(any::<bool>()),
            prop::option::of("[a-z0-9,\" ]{1,6}"),
        )
            .prop_map(
                |(split, label, vector, ood_truth, group_id)| EmbeddingRecord {
                    id: String::new(),
                    split,
                    label: split.requires_label().then_some(label),
                    vector,
                    ood_truth,
                    group_id,
                },
            )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_stores_round_trip_bit_exactly(
            (records, fmt) in (1usize..6).prop_flat_map(|d| (
                prop::collection::vec(arb_record(d), 0..1000),
                prop::sample::select(vec![Format::Jsonl, Format::Csv]),
            ))
        ) {
            let records: Vec<_> = records
                .into_iter()
                .enumerate()
                .map(|(i, r)| EmbeddingRecord { id: format!("id-{i}"), ..r })
                .collect();
            let store = Store::new(records).unwrap();
            let back = round_trip(&store, fmt);
            prop_assert_eq!(back.len(), store.len());
            for (a, b) in store.records().iter().zip(back.records()) {
                prop_assert_eq!(&a.id, &b.id);
                prop_assert_eq!(a.split, b.split);
                prop_assert_eq!(a.label, b.label);
                prop_assert_eq!(a.ood_truth, b.ood_truth);
                prop_assert_eq!(&a.group_id, &b.group_id);
                let bits_a: Vec<u64> = a.vector.iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.vector.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }
}
