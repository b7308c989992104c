use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "t,ax,ay,az,gear";

/// Skiing gear label. Class index 0 is gear 2, index 1 is gear 3.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gear {
    Two,
    Three,
}

impl Gear {
    pub const ALL: [Gear; 2] = [Gear::Two, Gear::Three];

    pub fn number(self) -> u8 {
        match self {
            Gear::Two => 2,
            Gear::Three => 3,
        }
    }

    pub fn class_index(self) -> usize {
        match self {
            Gear::Two => 0,
            Gear::Three => 1,
        }
    }

    pub fn from_number(n: i64) -> Option<Gear> {
        match n {
            2 => Some(Gear::Two),
            3 => Some(Gear::Three),
            _ => None,
        }
    }
}

impl fmt::Display for Gear {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// One accelerometer sample on the 50 Hz grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub t: u64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
    pub gear: Gear,
}

impl Record {
    pub fn channels(&self) -> [f64; 3] {
        [self.ax, self.ay, self.az]
    }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    read_csv(File::open(path)?, path)
}

/// Parses `t,ax,ay,az,gear` rows. `source` only labels error messages.
pub fn read_csv<R: Read>(input: R, source: &Path) -> Result<Vec<Record>> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(parse_err(1, "empty file".into()));
    }
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(parse_err(1, format!("expected header '{CSV_HEADER}'")));
    }

    let mut records: Vec<Record> = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 5 {
            return Err(parse_err(line, format!("expected 5 fields, found {}", row.len())));
        }
        let t: u64 = row[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("bad sample index '{}'", &row[0])))?;
        let mut axes = [0.0; 3];
        for (k, v) in axes.iter_mut().enumerate() {
            let field = row[k + 1].trim();
            *v = field
                .parse()
                .ok()
                .filter(|x: &f64| x.is_finite())
                .ok_or_else(|| parse_err(line, format!("bad acceleration value '{field}'")))?;
        }
        let gear_field = row[4].trim();
        let gear = gear_field
            .parse::<i64>()
            .ok()
            .and_then(Gear::from_number)
            .ok_or_else(|| parse_err(line, format!("unknown gear '{gear_field}', expected 2 or 3")))?;
        if let Some(prev) = records.last() {
            if t <= prev.t {
                return Err(parse_err(line, format!("sample index {t} does not increase (previous {})", prev.t)));
            }
        }
        records.push(Record {
            t,
            ax: axes[0],
            ay: axes[1],
            az: axes[2],
            gear,
        });
    }
    if records.is_empty() {
        return Err(parse_err(1, "empty file: no records".into()));
    }
    Ok(records)
}

/// Writes the canonical form: LF endings, shortest round-trip float formatting.
pub fn write_csv<W: Write>(out: W, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{},{},{},{},{}", r.t, r.ax, r.ay, r.az, r.gear)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    write_csv(File::create(path)?, records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<Record>> {
        read_csv(text.as_bytes(), Path::new("mem.csv"))
    }

    #[test]
    fn well_formed_rows_in_order() {
        let text = "t,ax,ay,az,gear\n0,0.5,1,-1,2\n1,0.25,1,-1,2\n2,0,0,0,3\n3,1e-3,2.5,3,3\n4,7,8,9,2\n";
        let recs = parse(text).unwrap();
        assert_eq!(recs.len(), 5);
        assert_eq!(recs.iter().map(|r| r.t).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert_eq!(recs[3].ax, 1e-3);
        assert_eq!(recs[2].gear, Gear::Three);
    }

    #[test]
    fn unknown_gear_names_line() {
        let err = parse("t,ax,ay,az,gear\n0,1,2,3,2\n1,1,2,3,7\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":3:") && msg.contains("gear"), "{msg}");
    }

    #[test]
    fn malformed_rows() {
        assert!(parse("t,ax,ay,az,gear\n0,1,2,x,2\n").is_err());
        assert!(parse("t,ax,ay,az,gear\n0,1,2,3\n").is_err());
        assert!(parse("t,ax,ay,az,gear\n0,1,2,inf,2\n").is_err());
        assert!(parse("t,x,y,z,label\n0,1,2,3,2\n").is_err());
    }

    #[test]
    fn empty_inputs() {
        assert!(parse("").is_err());
        assert!(parse("t,ax,ay,az,gear\n").is_err());
    }

    #[test]
    fn non_monotone_index() {
        let err = parse("t,ax,ay,az,gear\n0,1,2,3,2\n5,1,2,3,2\n5,1,2,3,2\n").unwrap_err();
        assert!(err.to_string().contains(":4:"), "{err}");
    }

    #[test]
    fn canonical_text_round_trips() {
        let recs = vec![
            Record { t: 0, ax: 0.1, ay: -2.0, az: 1.0 / 3.0, gear: Gear::Two },
            Record { t: 1, ax: 1e-300, ay: 123456.789, az: -0.0, gear: Gear::Three },
        ];
        let mut first = Vec::new();
        write_csv(&mut first, &recs).unwrap();
        let back = read_csv(&first[..], Path::new("x")).unwrap();
        assert_eq!(back, recs);
        let mut second = Vec::new();
        write_csv(&mut second, &back).unwrap();
        assert_eq!(first, second);
        assert!(!first.contains(&b'\r'));
    }
}
