//! Columnar triplet files.
//!
//! ```text
//! # imgalign triplet dataset
//! # version: 1
//! # config: {"n_concepts":8,...}
//! concept_id,label_swapped,h_0_0,…,cl_0_0,…,cw_0_0,…
//! 3,0,0.12,…
//! ```
//!
//! Header comment lines come first; the column header names every matrix
//! entry as `<prefix>_<row>_<col>` with prefixes `h` (guidance), `cl`
//! (losing features) and `cw` (winning features). Values use the shortest
//! decimal form that parses back to the same `f64`.

use std::io::Write;

use super::{PreferenceTriplet, WorldConfig};
use crate::error::{Error, Result};
use crate::nn::Matrix;

pub const DATASET_VERSION: u32 = 1;
const TITLE: &str = "# imgalign triplet dataset";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: WorldConfig,
    pub triplets: Vec<PreferenceTriplet>,
}

fn column_names(config: &WorldConfig) -> Vec<String> {
    let mut names = vec!["concept_id".to_string(), "label_swapped".to_string()];
    let blocks = [
        ("h", config.n_guidance_tokens, config.d_guidance),
        ("cl", config.n_image_tokens, config.d_image),
        ("cw", config.n_image_tokens, config.d_image),
    ];
    for (prefix, rows, cols) in blocks {
        for r in 0..rows {
            for c in 0..cols {
                names.push(format!("{prefix}_{r}_{c}"));
            }
        }
    }
    names
}

pub fn write_dataset<W: Write>(dataset: &Dataset, out: W) -> Result<()> {
    let config = &dataset.config;
    let mut out = out;
    let json = serde_json::to_string(config).map_err(|e| Error::config(e.to_string()))?;
    writeln!(out, "{TITLE}")?;
    writeln!(out, "# version: {DATASET_VERSION}")?;
    writeln!(out, "# config: {json}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(column_names(config)).map_err(csv_io)?;
    for t in &dataset.triplets {
        let shapes = [
            (&t.guidance, (config.n_guidance_tokens, config.d_guidance)),
            (&t.losing, (config.n_image_tokens, config.d_image)),
            (&t.winning, (config.n_image_tokens, config.d_image)),
        ];
        for (m, expected) in shapes {
            if m.shape() != expected {
                return Err(Error::Shape {
                    op: "write_dataset",
                    left: expected,
                    right: m.shape(),
                });
            }
        }
        let mut record = vec![t.concept_id.to_string(), (t.label_swapped as u8).to_string()];
        for m in [&t.guidance, &t.losing, &t.winning] {
            record.extend(m.as_slice().iter().map(|v| v.to_string()));
        }
        w.write_record(&record).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::config(format!("{other:?}")),
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

/// Reads the next `\n`-terminated line starting at `*offset`.
fn header_line<'a>(text: &'a str, offset: &mut usize, prefix: &str) -> Result<&'a str> {
    let rest = &text[*offset..];
    let end = rest
        .find('\n')
        .ok_or_else(|| parse_err(*offset, "unterminated header line"))?;
    let line = &rest[..end];
    let value = line
        .strip_prefix(prefix)
        .ok_or_else(|| parse_err(*offset, format!("expected header line starting with {prefix:?}")))?;
    *offset += end + 1;
    Ok(value)
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset> {
    let text = std::str::from_utf8(bytes).map_err(|e| parse_err(e.valid_up_to(), "invalid UTF-8"))?;
    let mut offset = 0;
    header_line(text, &mut offset, TITLE)?;
    let version_at = offset;
    let version = header_line(text, &mut offset, "# version: ")?;
    let version: u32 = version
        .trim()
        .parse()
        .map_err(|_| parse_err(version_at, format!("bad version {version:?}")))?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let config_at = offset;
    let json = header_line(text, &mut offset, "# config: ")?;
    let config: WorldConfig =
        serde_json::from_str(json).map_err(|e| parse_err(config_at, format!("bad config: {e}")))?;
    config.validate().map_err(|e| parse_err(config_at, e.to_string()))?;

    let body = &text.as_bytes()[offset..];
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(body);
    let expected = column_names(&config);
    let headers = reader
        .headers()
        .map_err(|e| parse_err(offset, format!("bad column header: {e}")))?;
    if headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(offset, "column header does not match the config shapes"));
    }

    let mut triplets = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let at = offset + reader.position().byte() as usize;
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(parse_err(at, e.to_string())),
        }
        if record.len() != expected.len() {
            return Err(parse_err(
                at,
                format!("row has {} fields, expected {}", record.len(), expected.len()),
            ));
        }
        let concept_id: usize = record[0]
            .parse()
            .map_err(|_| parse_err(at, format!("bad concept_id {:?}", &record[0])))?;
        if concept_id >= config.n_concepts {
            return Err(parse_err(at, format!("concept_id {concept_id} out of range")));
        }
        let label_swapped = match &record[1] {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(at, format!("bad label_swapped {other:?}"))),
        };
        let mut values = Vec::with_capacity(record.len() - 2);
        for (i, field) in record.iter().enumerate().skip(2) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(at, format!("bad value {field:?} in column {}", expected[i])))?;
            values.push(v);
        }
        let g = config.n_guidance_tokens * config.d_guidance;
        let im = config.n_image_tokens * config.d_image;
        let block = |start: usize, rows: usize, cols: usize| {
            Matrix::from_vec(rows, cols, values[start..start + rows * cols].to_vec())
        };
        triplets.push(PreferenceTriplet {
            concept_id,
            label_swapped,
            guidance: block(0, config.n_guidance_tokens, config.d_guidance)?,
            losing: block(g, config.n_image_tokens, config.d_image)?,
            winning: block(g + im, config.n_image_tokens, config.d_image)?,
        });
    }
    Ok(Dataset { config, triplets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::synthworld::make_world;

    fn sample_dataset(n: usize) -> Dataset {
        let config = WorldConfig {
            label_noise: 0.2,
            ..WorldConfig::default()
        };
        let world = make_world(config).unwrap();
        let mut s = world.sampler(Stream::Data);
        Dataset {
            config,
            triplets: (0..n).map(|_| s.next_triplet()).collect(),
        }
    }

    fn encode(d: &Dataset) -> Vec<u8> {
        let mut buf = Vec::new();
        write_dataset(d, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_exact() {
        let d = sample_dataset(40);
        let bytes = encode(&d);
        let back = read_dataset(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn empty_dataset_keeps_header() {
        let d = sample_dataset(0);
        let bytes = encode(&d);
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.starts_with(TITLE));
        assert!(text.contains("concept_id,label_swapped,h_0_0"));
        assert_eq!(read_dataset(&bytes).unwrap(), d);
    }

    #[test]
    fn version_mismatch_reported() {
        let text = String::from_utf8(encode(&sample_dataset(1))).unwrap();
        let bumped = text.replace("# version: 1", "# version: 9");
        assert!(matches!(
            read_dataset(bumped.as_bytes()),
            Err(Error::Version { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn bad_value_reports_row_offset() {
        let d = sample_dataset(3);
        let text = String::from_utf8(encode(&d)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let row_start: usize = lines[..5].iter().map(|l| l.len() + 1).sum();
        let mut broken = lines.clone();
        let bad_row = broken[5].replacen(',', ",x", 2);
        broken[5] = &bad_row;
        let broken = broken.join("\n") + "\n";
        match read_dataset(broken.as_bytes()) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, row_start),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_row_is_rejected() {
        let bytes = encode(&sample_dataset(2));
        let cut = &bytes[..bytes.len() - 30];
        assert!(matches!(read_dataset(cut), Err(Error::Parse { .. })));
    }
}
