use std::io::Read;
use std::path::Path;

use serde::Serialize;

use super::dataset::{check_sample, DomainDataset, Sample};
use super::schema::Schema;
use crate::error::{Error, Result};

/// A row that could not be turned into a sample and was skipped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MalformedRow {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct CsvLoad {
    pub dataset: DomainDataset,
    pub malformed: Vec<MalformedRow>,
}

/// Reads `domain,label,<fields...>` rows.
///
/// A header that does not match the schema is a schema error and a feature
/// index outside its vocabulary is a data error. Rows with the wrong arity,
/// non-integer cells, a bad label or an unknown domain are skipped and
/// reported in [`CsvLoad::malformed`].
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<CsvLoad> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<CsvLoad> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::None)
        .from_reader(reader);

    let header = rdr
        .headers()
        .map_err(|e| Error::Schema(format!("unreadable header: {e}")))?;
    let expected = schema.csv_header();
    for name in &expected {
        if !header.iter().any(|h| h == name) {
            return Err(Error::Schema(format!("missing column `{name}`")));
        }
    }
    if header.len() != expected.len() || header.iter().zip(&expected).any(|(h, e)| h != e) {
        return Err(Error::Schema(format!(
            "header {:?} does not match expected {:?}",
            header.iter().collect::<Vec<_>>(),
            expected
        )));
    }

    let mut dataset = DomainDataset::empty(schema.clone());
    let mut malformed = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = match rdr.read_record(&mut record) {
            Ok(more) => more,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line() as usize);
                malformed.push(MalformedRow {
                    line,
                    reason: e.to_string(),
                });
                if matches!(e.kind(), csv::ErrorKind::Io(_)) {
                    break;
                }
                continue;
            }
        };
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line() as usize);
        match parse_row(&record, schema) {
            Ok(sample) => {
                // Vocabulary violations are hard errors.
                check_sample(schema, &sample, line)?;
                dataset.domains[sample.domain].push(sample);
            }
            Err(reason) => malformed.push(MalformedRow { line, reason }),
        }
    }
    Ok(CsvLoad { dataset, malformed })
}

fn parse_row(record: &csv::StringRecord, schema: &Schema) -> std::result::Result<Sample, String> {
    let want = schema.fields.len() + 2;
    if record.len() != want {
        return Err(format!("expected {want} columns, found {}", record.len()));
    }
    let cell = |i: usize| -> std::result::Result<u64, String> {
        record[i].parse::<u64>().map_err(|_| {
            format!(
                "column {} value `{}` is not a non-negative integer",
                i + 1,
                &record[i]
            )
        })
    };
    let domain = cell(0)?;
    if domain >= schema.domains as u64 {
        return Err(format!("domain {domain} outside [0, {})", schema.domains));
    }
    let label = cell(1)?;
    if label > 1 {
        return Err(format!("label {label} is not 0/1"));
    }
    let mut features = Vec::with_capacity(schema.fields.len());
    for i in 2..want {
        let v = cell(i)?;
        // Anything past u32 is necessarily outside every vocabulary.
        features.push(u32::try_from(v).unwrap_or(u32::MAX));
    }
    Ok(Sample {
        domain: domain as usize,
        label: label as u8,
        features,
    })
}

/// Writes a dataset back out in the same CSV layout.
pub fn write_csv<W: std::io::Write>(dataset: &DomainDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| Error::Usage(format!("csv write failed: {e}"));
    w.write_record(dataset.schema.csv_header()).map_err(io)?;
    for s in dataset.domains.iter().flatten() {
        let mut row = vec![s.domain.to_string(), s.label.to_string()];
        row.extend(s.features.iter().map(u32::to_string));
        w.write_record(&row).map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::Usage(format!("csv flush failed: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::schema::FieldSpec;

    fn schema() -> Schema {
        Schema::new(
            2,
            vec![
                FieldSpec {
                    name: "f0".into(),
                    vocab: 10,
                },
                FieldSpec {
                    name: "f1".into(),
                    vocab: 20,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn parses_a_row() {
        let load = read_csv("domain,label,f0,f1\n1,1,4,17\n".as_bytes(), &schema()).unwrap();
        assert_eq!(
            load.dataset.domains[1],
            vec![Sample {
                domain: 1,
                label: 1,
                features: vec![4, 17]
            }]
        );
        assert!(load.malformed.is_empty());
    }

    #[test]
    fn empty_body_is_empty_dataset() {
        let load = read_csv("domain,label,f0,f1\n".as_bytes(), &schema()).unwrap();
        assert!(load.dataset.is_empty());
        assert_eq!(load.dataset.populated_domains(), 0);
    }

    #[test]
    fn vocab_boundary_is_data_error() {
        let err = read_csv(
            "domain,label,f0,f1\n0,0,1,1\n0,1,10,3\n".as_bytes(),
            &schema(),
        )
        .unwrap_err();
        match err {
            Error::Data { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("f0"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        assert!(matches!(
            read_csv("domain,label,f0\n0,0,1\n".as_bytes(), &schema()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn malformed_rows_are_counted() {
        let text = "domain,label,f0,f1\n0,1,2,3\n0,x,2,3\n1,1,2\n5,0,1,1\n0,2,1,1\n1,0,9,19\n";
        let load = read_csv(text.as_bytes(), &schema()).unwrap();
        assert_eq!(load.dataset.len(), 2);
        assert_eq!(
            load.malformed.iter().map(|m| m.line).collect::<Vec<_>>(),
            vec![3, 4, 5, 6]
        );
    }

    #[test]
    fn write_then_read() {
        let load = read_csv(
            "domain,label,f0,f1\n1,1,4,17\n0,0,0,0\n".as_bytes(),
            &schema(),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_csv(&load.dataset, &mut buf).unwrap();
        let again = read_csv(buf.as_slice(), &schema()).unwrap();
        assert_eq!(again.dataset, load.dataset);
    }
}
