//! CSV ingestion and serialization.
//!
//! Glucose files carry the header `user_id,timestamp_min,bg_mgdl`; an empty
//! `bg_mgdl` cell is the missing sentinel. Side files carry
//! `user_id,timestamp_min,<feature names...>` and must align 1:1 with the
//! glucose timestamps of each user. Text files carry
//! `user_id,timestamp_min,text` with RFC-4180 quoting. Everything is UTF-8
//! with LF line endings.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use super::{GlucoseSeries, SideInfo, TextBundle, UserRecord, GLUCOSE_FLOOR, MISSING};
use crate::error::{Error, Result};

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn record_line(record: &csv::StringRecord) -> usize {
    record.position().map_or(0, |p| p.line() as usize)
}

struct RawColumn {
    timestamps: Vec<i64>,
    values: Vec<f64>,
}

/// Parse per-user glucose series, with optional aligned side information.
///
/// Users are returned sorted by id. Within each user the file order must
/// already be strictly increasing in time; a violating row is reported with
/// its line number.
pub fn parse_series_csv(
    path_glucose: &Path,
    path_side: Option<&Path>,
) -> Result<Vec<UserRecord>> {
    let mut reader = csv::Reader::from_path(path_glucose)?;
    {
        let headers = reader.headers()?;
        let expect = ["user_id", "timestamp_min", "bg_mgdl"];
        if headers.len() != 3 || headers.iter().zip(expect).any(|(h, e)| h != e) {
            return Err(Error::Schema(format!(
                "glucose header must be `user_id,timestamp_min,bg_mgdl`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
    }

    let mut per_user: BTreeMap<String, RawColumn> = BTreeMap::new();
    for row in reader.records() {
        let record = row?;
        let line = record_line(&record);
        if record.len() != 3 {
            return Err(parse_error(line, format!("expected 3 fields, got {}", record.len())));
        }
        let user = record[0].to_string();
        let ts: i64 = record[1]
            .parse()
            .map_err(|_| parse_error(line, format!("bad timestamp `{}`", &record[1])))?;
        if ts < 0 {
            return Err(parse_error(line, format!("negative timestamp {ts}")));
        }
        let value = if record[2].is_empty() {
            MISSING
        } else {
            let v: f64 = record[2]
                .parse()
                .map_err(|_| parse_error(line, format!("bad glucose value `{}`", &record[2])))?;
            if !v.is_finite() || (v != MISSING && v < GLUCOSE_FLOOR) {
                return Err(parse_error(
                    line,
                    format!("glucose value {v} must be empty/0 (missing) or >= {GLUCOSE_FLOOR}"),
                ));
            }
            v
        };
        let entry = per_user.entry(user).or_insert_with(|| RawColumn {
            timestamps: Vec::new(),
            values: Vec::new(),
        });
        if let Some(&last) = entry.timestamps.last() {
            if ts <= last {
                return Err(parse_error(
                    line,
                    format!("timestamp {ts} does not increase past {last}"),
                ));
            }
        }
        entry.timestamps.push(ts);
        entry.values.push(value);
    }

    let mut sides: BTreeMap<String, SideInfo> = BTreeMap::new();
    if let Some(side_path) = path_side {
        for side in parse_side_csv(side_path)? {
            sides.insert(side.user_id.clone(), side);
        }
    }

    let mut out = Vec::with_capacity(per_user.len());
    for (user_id, raw) in per_user {
        let series = GlucoseSeries::new(user_id.clone(), raw.timestamps, raw.values)?;
        let side = match sides.remove(&user_id) {
            Some(side) => {
                if side.timestamps != series.timestamps {
                    return Err(Error::Schema(format!(
                        "side rows for `{user_id}` do not align 1:1 with the glucose timestamps"
                    )));
                }
                Some(side)
            }
            None => None,
        };
        out.push(UserRecord { series, side });
    }
    if let Some(orphan) = sides.keys().next() {
        return Err(Error::Schema(format!(
            "side info user `{orphan}` has no glucose series"
        )));
    }
    Ok(out)
}

fn parse_side_csv(path: &Path) -> Result<Vec<SideInfo>> {
    let mut reader = csv::Reader::from_path(path)?;
    let feature_names: Vec<String> = {
        let headers = reader.headers()?;
        if headers.len() < 3 || &headers[0] != "user_id" || &headers[1] != "timestamp_min" {
            return Err(Error::Schema(format!(
                "side header must start with `user_id,timestamp_min`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        headers.iter().skip(2).map(|s| s.to_string()).collect()
    };

    struct RawSide {
        timestamps: Vec<i64>,
        rows: Vec<Vec<f64>>,
    }
    let mut per_user: BTreeMap<String, RawSide> = BTreeMap::new();
    for row in reader.records() {
        let record = row?;
        let line = record_line(&record);
        if record.len() != feature_names.len() + 2 {
            return Err(parse_error(
                line,
                format!(
                    "expected {} fields, got {}",
                    feature_names.len() + 2,
                    record.len()
                ),
            ));
        }
        let user = record[0].to_string();
        let ts: i64 = record[1]
            .parse()
            .map_err(|_| parse_error(line, format!("bad timestamp `{}`", &record[1])))?;
        let mut features = Vec::with_capacity(feature_names.len());
        for field in record.iter().skip(2) {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_error(line, format!("bad feature value `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_error(line, format!("non-finite feature value {v}")));
            }
            features.push(v);
        }
        let entry = per_user.entry(user).or_insert_with(|| RawSide {
            timestamps: Vec::new(),
            rows: Vec::new(),
        });
        if let Some(&last) = entry.timestamps.last() {
            if ts <= last {
                return Err(parse_error(
                    line,
                    format!("timestamp {ts} does not increase past {last}"),
                ));
            }
        }
        entry.timestamps.push(ts);
        entry.rows.push(features);
    }

    per_user
        .into_iter()
        .map(|(user_id, raw)| {
            let features = DMatrix::from_fn(raw.rows.len(), feature_names.len(), |r, c| {
                raw.rows[r][c]
            });
            SideInfo::new(user_id, raw.timestamps, features, feature_names.clone())
        })
        .collect()
}

/// Shortest round-trip decimal form of a value.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Serialize user records back to the CSV schemas. The sentinel is written
/// as an empty cell, so parse -> write -> parse is lossless.
pub fn write_series_csv(
    users: &[UserRecord],
    path_glucose: &Path,
    path_side: Option<&Path>,
) -> Result<()> {
    let mut g = std::io::BufWriter::new(std::fs::File::create(path_glucose)?);
    writeln!(g, "user_id,timestamp_min,bg_mgdl")?;
    for user in users {
        let s = &user.series;
        for (ts, v) in s.timestamps.iter().zip(&s.values) {
            if *v == MISSING {
                writeln!(g, "{},{},", s.user_id, ts)?;
            } else {
                writeln!(g, "{},{},{}", s.user_id, ts, fmt_f64(*v))?;
            }
        }
    }
    g.flush()?;

    if let Some(side_path) = path_side {
        let names: Option<&[String]> = users
            .iter()
            .find_map(|u| u.side.as_ref())
            .map(|s| s.feature_names.as_slice());
        let Some(names) = names else {
            return Err(Error::Schema(
                "side output requested but no user carries side info".into(),
            ));
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(side_path)?);
        writeln!(w, "user_id,timestamp_min,{}", names.join(","))?;
        for user in users {
            if let Some(side) = &user.side {
                if side.feature_names != names {
                    return Err(Error::Schema(format!(
                        "user `{}` has a different side schema",
                        side.user_id
                    )));
                }
                for (r, ts) in side.timestamps.iter().enumerate() {
                    let fields: Vec<String> = (0..side.features.ncols())
                        .map(|c| fmt_f64(side.features[(r, c)]))
                        .collect();
                    writeln!(w, "{},{},{}", side.user_id, ts, fields.join(","))?;
                }
            }
        }
        w.flush()?;
    }
    Ok(())
}

/// Parse per-timestamp text bundles (one post per row).
pub fn parse_text_csv(path: &Path) -> Result<Vec<TextBundle>> {
    let mut reader = csv::Reader::from_path(path)?;
    {
        let headers = reader.headers()?;
        let expect = ["user_id", "timestamp_min", "text"];
        if headers.len() != 3 || headers.iter().zip(expect).any(|(h, e)| h != e) {
            return Err(Error::Schema(format!(
                "text header must be `user_id,timestamp_min,text`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let record = row?;
        let line = record_line(&record);
        let ts: i64 = record[1]
            .parse()
            .map_err(|_| parse_error(line, format!("bad timestamp `{}`", &record[1])))?;
        out.push(TextBundle {
            user_id: record[0].to_string(),
            timestamp_min: ts,
            text: record[2].to_string(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_well_formed_rows() {
        let f = write_tmp("user_id,timestamp_min,bg_mgdl\nu1,0,110\nu1,5,115.5\nu1,10,120\n");
        let users = parse_series_csv(f.path(), None).unwrap();
        assert_eq!(users.len(), 1);
        assert_eq!(users[0].series.len(), 3);
        assert_eq!(users[0].series.values[1], 115.5);
    }

    #[test]
    fn empty_cell_becomes_sentinel() {
        let f = write_tmp("user_id,timestamp_min,bg_mgdl\nu1,0,110\nu1,5,\n");
        let users = parse_series_csv(f.path(), None).unwrap();
        assert_eq!(users[0].series.values[1], MISSING);
    }

    #[test]
    fn backwards_timestamp_reports_line() {
        let f = write_tmp("user_id,timestamp_min,bg_mgdl\nu1,10,110\nu1,5,115\n");
        match parse_series_csv(f.path(), None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_columns_rejected() {
        let f = write_tmp("user_id,timestamp_min,bg_mgdl,extra\nu1,0,110,1\n");
        assert!(matches!(
            parse_series_csv(f.path(), None),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn side_info_must_align() {
        let g = write_tmp("user_id,timestamp_min,bg_mgdl\nu1,0,110\nu1,5,120\n");
        let s = write_tmp("user_id,timestamp_min,f1\nu1,0,0.5\n");
        assert!(matches!(
            parse_series_csv(g.path(), Some(s.path())),
            Err(Error::Schema(_))
        ));
        let s2 = write_tmp("user_id,timestamp_min,f1\nu1,0,0.5\nu1,5,0.25\n");
        let users = parse_series_csv(g.path(), Some(s2.path())).unwrap();
        let side = users[0].side.as_ref().unwrap();
        assert_eq!(side.features[(1, 0)], 0.25);
    }

    #[test]
    fn roundtrip_is_lossless() {
        let g = write_tmp(
            "user_id,timestamp_min,bg_mgdl\nbob,0,110.25\nbob,5,\nbob,12,89\nzoe,3,250.125\n",
        );
        let s = write_tmp(
            "user_id,timestamp_min,f a,f-b\nbob,0,0.1,-2\nbob,5,0.2,3.5\nbob,12,0,0\nzoe,3,1,1\n",
        );
        let users = parse_series_csv(g.path(), Some(s.path())).unwrap();

        let g2 = tempfile::NamedTempFile::new().unwrap();
        let s2 = tempfile::NamedTempFile::new().unwrap();
        write_series_csv(&users, g2.path(), Some(s2.path())).unwrap();
        let reparsed = parse_series_csv(g2.path(), Some(s2.path())).unwrap();
        assert_eq!(users, reparsed);

        // and a second write is byte-identical
        let g3 = tempfile::NamedTempFile::new().unwrap();
        let s3 = tempfile::NamedTempFile::new().unwrap();
        write_series_csv(&reparsed, g3.path(), Some(s3.path())).unwrap();
        assert_eq!(
            std::fs::read(g2.path()).unwrap(),
            std::fs::read(g3.path()).unwrap()
        );
        assert_eq!(
            std::fs::read(s2.path()).unwrap(),
            std::fs::read(s3.path()).unwrap()
        );
    }

    #[test]
    fn text_csv_handles_quoting() {
        let f = write_tmp(
            "user_id,timestamp_min,text\nu1,0,\"feeling low, grabbing juice\"\nu1,60,ran 5k\n",
        );
        let bundles = parse_text_csv(f.path()).unwrap();
        assert_eq!(bundles.len(), 2);
        assert_eq!(bundles[0].text, "feeling low, grabbing juice");
    }
}
