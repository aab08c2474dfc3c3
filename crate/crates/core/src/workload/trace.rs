//! CSV trace replay.
//!
//! Header: `arrival_ms,service_id,text_tokens,num_images,image_dims,output_tokens`,
//! with `image_dims` a `;`-separated list of `WxH` entries.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Request, RequestId};

pub const TRACE_HEADER: [&str; 6] = [
    "arrival_ms",
    "service_id",
    "text_tokens",
    "num_images",
    "image_dims",
    "output_tokens",
];

/// Largest tolerated share of malformed rows.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub arrival_ms: f64,
    pub service_id: String,
    pub text_tokens: u32,
    pub image_dims: Vec<(u32, u32)>,
    pub output_tokens: u32,
}

impl TraceRecord {
    pub fn from_request(r: &Request) -> Self {
        TraceRecord {
            arrival_ms: r.arrival_ms,
            service_id: r.service_id.clone(),
            text_tokens: r.text_tokens,
            image_dims: r.images.iter().map(|i| (i.width_px, i.height_px)).collect(),
            output_tokens: r.output_tokens,
        }
    }

    pub fn into_request(self, id: u64, model: &ModelSpec) -> Request {
        Request {
            id: RequestId(id),
            arrival_ms: self.arrival_ms,
            text_tokens: self.text_tokens,
            images: self
                .image_dims
                .iter()
                .map(|&(w, h)| model.image(w, h))
                .collect(),
            output_tokens: self.output_tokens,
            service_id: self.service_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTrace {
    pub requests: Vec<Request>,
    pub rows: usize,
    pub malformed: usize,
}

fn parse_dims(field: &str) -> Option<Vec<(u32, u32)>> {
    let field = field.trim();
    if field.is_empty() {
        return Some(Vec::new());
    }
    field
        .split(';')
        .map(|d| {
            let (w, h) = d.trim().split_once(['x', 'X'])?;
            let w: u32 = w.trim().parse().ok()?;
            let h: u32 = h.trim().parse().ok()?;
            (w >= 1 && h >= 1).then_some((w, h))
        })
        .collect()
}

fn parse_row(row: &csv::StringRecord) -> Option<TraceRecord> {
    if row.len() != TRACE_HEADER.len() {
        return None;
    }
    let arrival_ms: f64 = row[0].trim().parse().ok()?;
    if !arrival_ms.is_finite() || arrival_ms < 0.0 {
        return None;
    }
    let text_tokens: u32 = row[2].trim().parse().ok()?;
    let num_images: usize = row[3].trim().parse().ok()?;
    let image_dims = parse_dims(&row[4])?;
    let output_tokens: u32 = row[5].trim().parse().ok()?;
    if image_dims.len() != num_images || output_tokens == 0 {
        return None;
    }
    if text_tokens == 0 && image_dims.is_empty() {
        return None;
    }
    Some(TraceRecord {
        arrival_ms,
        service_id: row[1].trim().to_string(),
        text_tokens,
        image_dims,
        output_tokens,
    })
}

/// Parses a trace from any reader. `origin` only labels errors.
pub fn parse_trace<R: Read>(reader: R, model: &ModelSpec, origin: &Path) -> Result<LoadedTrace> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut records = Vec::new();
    let mut rows = 0;
    let mut malformed = 0;
    if headers.is_empty() {
        return Ok(LoadedTrace {
            requests: Vec::new(),
            rows,
            malformed,
        });
    }
    if headers.iter().map(str::trim).ne(TRACE_HEADER) {
        return Err(Error::Trace {
            path: origin.to_path_buf(),
            reason: format!("unexpected header {:?}, expected {}", headers, TRACE_HEADER.join(",")),
        });
    }
    for row in rdr.records() {
        rows += 1;
        match row.ok().as_ref().and_then(parse_row) {
            Some(r) => records.push(r),
            None => malformed += 1,
        }
    }
    if rows > 0 && malformed as f64 > MAX_MALFORMED_FRACTION * rows as f64 {
        return Err(Error::Trace {
            path: origin.to_path_buf(),
            reason: format!("{malformed} of {rows} rows malformed (limit 1%)"),
        });
    }
    // Stable sort keeps file order among equal arrival times.
    records.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));
    let requests = records
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.into_request(i as u64, model))
        .collect();
    Ok(LoadedTrace {
        requests,
        rows,
        malformed,
    })
}

pub fn load_trace(path: &Path, model: &ModelSpec) -> Result<LoadedTrace> {
    let file = std::fs::File::open(path).map_err(|e| Error::Trace {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_trace(std::io::BufReader::new(file), model, path)
}

pub fn write_trace(path: &Path, requests: &[Request]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_HEADER)?;
    for r in requests {
        let dims: Vec<String> = r
            .images
            .iter()
            .map(|i| format!("{}x{}", i.width_px, i.height_px))
            .collect();
        w.write_record([
            format!("{}", r.arrival_ms),
            r.service_id.clone(),
            r.text_tokens.to_string(),
            r.images.len().to_string(),
            dims.join(";"),
            r.output_tokens.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn internvl() -> ModelSpec {
        ModelSpec::preset("internvl-26b").unwrap()
    }

    fn parse(text: &str) -> Result<LoadedTrace> {
        parse_trace(text.as_bytes(), &internvl(), Path::new("mem.csv"))
    }

    #[test]
    fn one_image_row() {
        let t = parse("arrival_ms,service_id,text_tokens,num_images,image_dims,output_tokens\n0,chat,100,1,896x896,64\n").unwrap();
        assert_eq!(t.requests.len(), 1);
        assert_eq!(t.requests[0].image_tokens(), 1280);
        assert_eq!(t.requests[0].text_tokens, 100);
        assert_eq!(t.malformed, 0);
    }

    #[test]
    fn empty_file_is_empty_stream() {
        let t = parse("").unwrap();
        assert!(t.requests.is_empty());
        assert_eq!(t.malformed, 0);
        let t = parse("arrival_ms,service_id,text_tokens,num_images,image_dims,output_tokens\n").unwrap();
        assert!(t.requests.is_empty());
    }

    #[test]
    fn rows_sorted_by_arrival() {
        let t = parse(
            "arrival_ms,service_id,text_tokens,num_images,image_dims,output_tokens\n\
             30,a,10,0,,5\n10,b,20,2,100x100;2000x300,5\n20,c,30,0,,5\n",
        )
        .unwrap();
        let arrivals: Vec<f64> = t.requests.iter().map(|r| r.arrival_ms).collect();
        assert_eq!(arrivals, vec![10.0, 20.0, 30.0]);
        let ids: Vec<u64> = t.requests.iter().map(|r| r.id.0).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert_eq!(t.requests[0].images.len(), 2);
    }

    fn rows(good: usize, bad: usize) -> String {
        let mut s = TRACE_HEADER.join(",") + "\n";
        for i in 0..good {
            s += &format!("{i},svc,10,0,,4\n");
        }
        for _ in 0..bad {
            s += "oops,svc,10,1,,4\n";
        }
        s
    }

    #[test]
    fn malformed_rows_counted_then_fatal_above_one_percent() {
        let t = parse(&rows(199, 1)).unwrap();
        assert_eq!(t.malformed, 1);
        assert_eq!(t.requests.len(), 199);
        assert!(matches!(parse(&rows(98, 2)), Err(Error::Trace { .. })));
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let src = parse(
            "arrival_ms,service_id,text_tokens,num_images,image_dims,output_tokens\n\
             1.5,a,10,0,,5\n2.25,v,0,3,448x448;896x896;10x4000,7\n",
        )
        .unwrap();
        write_trace(&path, &src.requests).unwrap();
        let back = load_trace(&path, &internvl()).unwrap();
        assert_eq!(back.requests, src.requests);
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_trace(Path::new("/nonexistent/trace.csv"), &internvl()).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/trace.csv"));
    }
}
