//! Line-oriented label and detection records.
//!
//! One object per line: `scene_id class_id xmin ymin xmax ymax [score]`,
//! whitespace separated, coordinates normalized corner form. Lines starting
//! with `#` and blank lines are ignored. Floats are written in shortest
//! round-trip form so a write/read cycle is lossless.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::metrics::{Detection, LabelSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub scene_id: u64,
    pub class_id: usize,
    pub bbox: BBox,
    pub score: Option<f64>,
}

pub fn format_record(r: &Record) -> String {
    let b = r.bbox;
    let mut s = format!("{} {} {:?} {:?} {:?} {:?}", r.scene_id, r.class_id, b.xmin, b.ymin, b.xmax, b.ymax);
    if let Some(sc) = r.score {
        let _ = write!(s, " {sc:?}");
    }
    s
}

pub fn parse_record(line: &str, line_no: usize) -> Result<Record> {
    let err = |reason: String| Error::Parse { line: line_no, reason };
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 6 && f.len() != 7 {
        return Err(err(format!("expected 6 or 7 fields, found {}", f.len())));
    }
    let scene_id = f[0].parse().map_err(|_| err(format!("bad scene id {:?}", f[0])))?;
    let class_id = f[1].parse().map_err(|_| err(format!("bad class id {:?}", f[1])))?;
    let mut c = [0.0; 4];
    for (slot, s) in c.iter_mut().zip(&f[2..6]) {
        *slot = s.parse().map_err(|_| err(format!("bad coordinate {s:?}")))?;
    }
    let bbox = BBox::new(c[0], c[1], c[2], c[3]);
    if !bbox.is_valid() {
        return Err(err(format!("box {c:?} is not a valid normalized corner box")));
    }
    let score = match f.get(6) {
        Some(s) => Some(s.parse().map_err(|_| err(format!("bad score {s:?}")))?),
        None => None,
    };
    Ok(Record { scene_id, class_id, bbox, score })
}

pub fn parse_records(text: &str) -> Result<Vec<Record>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| parse_record(l, i + 1))
        .collect()
}

/// Ground-truth records for scenes in order.
pub fn labels_to_text<'a>(scenes: impl IntoIterator<Item = (u64, &'a LabelSet)>) -> String {
    let mut out = String::new();
    for (id, labels) in scenes {
        for (b, c) in labels.iter() {
            out.push_str(&format_record(&Record { scene_id: id, class_id: c, bbox: *b, score: None }));
            out.push('\n');
        }
    }
    out
}

pub fn detections_to_text<'a>(scenes: impl IntoIterator<Item = (u64, &'a [Detection])>) -> String {
    let mut out = String::new();
    for (id, dets) in scenes {
        for d in dets {
            let r = Record { scene_id: id, class_id: d.class_id, bbox: d.bbox, score: Some(d.score) };
            out.push_str(&format_record(&r));
            out.push('\n');
        }
    }
    out
}

/// Groups records by scene id.
pub fn group_labels(records: &[Record]) -> BTreeMap<u64, LabelSet> {
    let mut map: BTreeMap<u64, LabelSet> = BTreeMap::new();
    for r in records {
        map.entry(r.scene_id).or_default().push(r.bbox, r.class_id);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut a = LabelSet::empty();
        a.push(BBox::new(0.1, 0.2, 0.30000000000000004, 0.4), 1);
        a.push(BBox::new(0.0, 0.0, 1.0, 1.0), 0);
        let text = labels_to_text([(7u64, &a)]);
        let recs = parse_records(&text).unwrap();
        assert_eq!(group_labels(&recs)[&7], a);

        let d = [Detection::new(BBox::new(0.5, 0.5, 0.75, 0.625), 1, 0.123456789)];
        let recs = parse_records(&detections_to_text([(3u64, &d[..])])).unwrap();
        assert_eq!(recs[0].score, Some(0.123456789));
        assert_eq!(recs[0].bbox, d[0].bbox);
    }

    #[test]
    fn malformed_lines_report_position() {
        let text = "# header\n1 0 0.1 0.1 0.2 0.2\n2 0 0.1 0.1 0.2\n";
        match parse_records(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_records("1 0 0.5 0.1 0.2 0.2").is_err());
        assert!(parse_records("x 0 0.1 0.1 0.2 0.2").is_err());
    }
}
