//! Line-oriented text format for surveys.
//!
//! ```text
//! SSS-SURVEY 1
//! SONAR tilt vertical_beam_width horizontal_beam_width
//! LINE j
//! PING k x y z qw qx qy qz side first_range resolution nbins
//! <nbins intensities>
//! <nbins validity flags, 0 or 1>
//! ALT x y z
//! ```
//!
//! Angles are radians. Numbers use the shortest representation that parses
//! back to the same `f64`, so a write/read cycle is lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Pose, Quaternion, Side, SonarGeometry, Vec3};

use super::{AltimeterReading, Bin, Ping, Survey, SurveyLine};

pub const SURVEY_MAGIC: &str = "SSS-SURVEY";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn write_header(out: &mut String, magic: &str, geom: Option<&SonarGeometry>) {
    let _ = writeln!(out, "{magic} {FORMAT_VERSION}");
    if let Some(g) = geom {
        let _ = writeln!(out, "SONAR {} {} {}", g.tilt, g.vertical_beam_width, g.horizontal_beam_width);
    }
}

pub(crate) fn write_ping(out: &mut String, ping: &Ping) {
    let p = &ping.pose.position;
    let q = &ping.pose.attitude;
    let _ = writeln!(
        out,
        "PING {} {} {} {} {} {} {} {} {} {} {} {}",
        ping.index,
        p.x,
        p.y,
        p.z,
        q.w,
        q.x,
        q.y,
        q.z,
        ping.geom.side.as_str(),
        ping.first_range,
        ping.resolution,
        ping.bins.len()
    );
    write_values(out, ping.bins.iter().map(|b| b.intensity));
    let flags: Vec<&str> = ping.bins.iter().map(|b| if b.valid { "1" } else { "0" }).collect();
    let _ = writeln!(out, "{}", flags.join(" "));
}

pub(crate) fn write_values(out: &mut String, values: impl Iterator<Item = f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

pub(crate) fn write_altimeter(out: &mut String, a: &AltimeterReading) {
    let _ = writeln!(out, "ALT {} {} {}", a.point.x, a.point.y, a.point.z);
}

/// Serializes a survey; altimeter readings follow the ping records they were taken with.
pub fn format_survey(survey: &Survey) -> String {
    let mut out = String::new();
    let geom = survey.pings().next().map(|p| p.geom);
    write_header(&mut out, SURVEY_MAGIC, geom.as_ref());
    for line in &survey.lines {
        let _ = writeln!(out, "LINE {}", line.index);
        let mut alt = line.altimeter.iter();
        for (i, ping) in line.pings.iter().enumerate() {
            write_ping(&mut out, ping);
            let last_of_index = line.pings.get(i + 1).is_none_or(|n| n.index != ping.index);
            if last_of_index {
                if let Some(a) = alt.next() {
                    write_altimeter(&mut out, a);
                }
            }
        }
        for a in alt {
            write_altimeter(&mut out, a);
        }
    }
    out
}

pub fn write_survey(survey: &Survey, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_survey(survey))?;
    Ok(())
}

pub fn read_survey(path: impl AsRef<Path>) -> Result<Survey> {
    parse_survey(&fs::read_to_string(path)?)
}

pub fn parse_survey(text: &str) -> Result<Survey> {
    let mut reader = Reader::new(text, SURVEY_MAGIC)?;
    let mut lines = Vec::new();
    while let Some(rec) = reader.next_record()? {
        match rec {
            Record::Line(j) => lines.push(SurveyLine { index: j, ..Default::default() }),
            Record::Ping(p) => current(&mut lines, reader.line_no)?.pings.push(p),
            Record::Alt(a) => current(&mut lines, reader.line_no)?.altimeter.push(a),
            Record::Extra(tag) => return Err(Error::parse(reader.line_no, format!("unexpected record {tag}"))),
        }
    }
    Ok(Survey { lines })
}

fn current(lines: &mut [SurveyLine], line_no: usize) -> Result<&mut SurveyLine> {
    lines.last_mut().ok_or_else(|| Error::parse(line_no, "record before any LINE"))
}

pub(crate) enum Record<'a> {
    Line(usize),
    Ping(Ping),
    Alt(AltimeterReading),
    /// Any other tagged line, passed through for extended formats.
    Extra(&'a str),
}

pub(crate) struct Reader<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    geom: Option<SonarGeometry>,
    /// 1-based number of the last line consumed.
    pub line_no: usize,
    pub last_ping: Option<usize>,
}

impl<'a> Reader<'a> {
    pub fn new(text: &'a str, magic: &str) -> Result<Self> {
        let mut r = Self { lines: text.lines().enumerate().peekable(), geom: None, line_no: 0, last_ping: None };
        let Some(header) = r.next_line() else {
            return Err(Error::parse(1, "missing header"));
        };
        let mut tok = header.split_whitespace();
        if tok.next() != Some(magic) {
            return Err(Error::parse(1, format!("expected {magic} header")));
        }
        match tok.next().map(str::parse::<u32>) {
            Some(Ok(FORMAT_VERSION)) => {}
            Some(Ok(v)) => return Err(Error::parse(1, format!("unsupported format version {v}"))),
            _ => return Err(Error::parse(1, "missing format version")),
        }
        Ok(r)
    }

    fn next_line(&mut self) -> Option<&'a str> {
        for (i, l) in self.lines.by_ref() {
            self.line_no = i + 1;
            let l = l.trim();
            if !l.is_empty() && !l.starts_with('#') {
                return Some(l);
            }
        }
        None
    }

    fn record_err(&self, msg: impl Into<String>) -> Error {
        match self.last_ping {
            Some(k) => Error::Record { record: k, msg: format!("line {}: {}", self.line_no, msg.into()) },
            None => Error::parse(self.line_no, msg),
        }
    }

    /// Reads a data line of exactly `n` numbers belonging to the current ping.
    pub fn values(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let Some(line) = self.next_line() else {
            return Err(self.record_err(format!("truncated: missing {what} line")));
        };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| self.record_err(format!("non-numeric {what} value")))?;
        if vals.len() != n {
            return Err(self.record_err(format!("expected {n} {what} values, found {}", vals.len())));
        }
        Ok(vals)
    }

    /// Like [`Reader::values`] but the line must start with `tag`.
    pub fn tagged_values(&mut self, tag: &str, n: usize) -> Result<Vec<f64>> {
        let Some(line) = self.next_line() else {
            return Err(self.record_err(format!("truncated: missing {tag} line")));
        };
        let mut tok = line.split_whitespace();
        if tok.next() != Some(tag) {
            return Err(self.record_err(format!("expected {tag} line")));
        }
        let vals: Vec<f64> = tok
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| self.record_err(format!("non-numeric {tag} value")))?;
        if vals.len() != n {
            return Err(self.record_err(format!("expected {n} {tag} values, found {}", vals.len())));
        }
        Ok(vals)
    }

    pub fn next_record(&mut self) -> Result<Option<Record<'a>>> {
        loop {
            let Some(line) = self.next_line() else {
                return Ok(None);
            };
            let mut tok = line.split_whitespace();
            let tag = tok.next().unwrap_or_default();
            let rest: Vec<&str> = tok.collect();
            let nums = |n: usize| -> Result<Vec<f64>> {
                if rest.len() != n {
                    return Err(Error::parse(self.line_no, format!("{tag} expects {n} fields")));
                }
                rest.iter()
                    .map(|t| t.parse::<f64>().map_err(|_| Error::parse(self.line_no, format!("bad number {t:?}"))))
                    .collect()
            };
            match tag {
                "SONAR" => {
                    let v = nums(3)?;
                    let g = SonarGeometry::new(v[0], v[1], v[2], Side::Starboard)
                        .map_err(|e| Error::parse(self.line_no, e.to_string()))?;
                    self.geom = Some(g);
                }
                "LINE" => {
                    let j = rest
                        .first()
                        .filter(|_| rest.len() == 1)
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::parse(self.line_no, "LINE expects an index"))?;
                    return Ok(Some(Record::Line(j)));
                }
                "ALT" => {
                    let v = nums(3)?;
                    return Ok(Some(Record::Alt(AltimeterReading { point: Vec3::new(v[0], v[1], v[2]) })));
                }
                "PING" => return self.ping(&rest).map(|p| Some(Record::Ping(p))),
                _ => return Ok(Some(Record::Extra(tag))),
            }
        }
    }

    fn ping(&mut self, f: &[&str]) -> Result<Ping> {
        let index: usize = f
            .first()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::parse(self.line_no, "PING record without a valid index"))?;
        self.last_ping = Some(index);
        if f.len() != 12 {
            return Err(self.record_err(format!("PING header expects 12 fields, found {}", f.len())));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| ());
        let vals: std::result::Result<Vec<f64>, ()> = [1, 2, 3, 4, 5, 6, 7, 9, 10].into_iter().map(num).collect();
        let vals = vals.map_err(|_| self.record_err("bad number in PING header"))?;
        let side = Side::parse(f[8]).ok_or_else(|| self.record_err(format!("unknown side {:?}", f[8])))?;
        let nbins: usize = f[11].parse().map_err(|_| self.record_err("bad bin count"))?;
        let q = Quaternion { w: vals[3], x: vals[4], y: vals[5], z: vals[6] };
        let qn = (q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        if !((qn - 1.0).abs() < 1e-6) {
            return Err(self.record_err("attitude quaternion is not unit"));
        }
        let pose = Pose::new(Vec3::new(vals[0], vals[1], vals[2]), q);
        let geom = self.geom.ok_or_else(|| self.record_err("PING before SONAR record"))?.with_side(side);
        let (first_range, resolution) = (vals[7], vals[8]);
        if !(first_range > 0.0 && resolution > 0.0) {
            return Err(self.record_err("range parameters must be positive"));
        }
        let intensities = self.values(nbins, "intensity")?;
        let Some(flag_line) = self.next_line() else {
            return Err(self.record_err("truncated: missing validity line"));
        };
        let flags: Vec<bool> = flag_line
            .split_whitespace()
            .map(|t| match t {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(()),
            })
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| self.record_err("validity flags must be 0 or 1"))?;
        if flags.len() != nbins {
            return Err(self.record_err(format!("expected {nbins} validity flags, found {}", flags.len())));
        }
        let bins = intensities.into_iter().zip(flags).map(|(intensity, valid)| Bin { intensity, valid }).collect();
        Ok(Ping { index, pose, geom, first_range, resolution, bins })
    }
}
