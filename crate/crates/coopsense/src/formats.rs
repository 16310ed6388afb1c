//! Plain-text point-cloud format used across the crate.
//!
//! One point per line, `x y z intensity` in fixed decimal with 9 digits
//! after the point, preceded by a single header line
//! `# frame=<id> n=<count>`. Writing a parsed file back reproduces it
//! byte for byte.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};

/// Decimal digits kept for every coordinate and intensity.
const DIGITS: usize = 9;

pub fn write_point_cloud(w: &mut impl Write, cloud: &PointCloud) -> Result<()> {
    writeln!(w, "# frame={} n={}", cloud.frame_id, cloud.len())?;
    for p in &cloud.points {
        writeln!(
            w,
            "{:.prec$} {:.prec$} {:.prec$} {:.prec$}",
            p.x,
            p.y,
            p.z,
            p.intensity,
            prec = DIGITS
        )?;
    }
    Ok(())
}

pub fn point_cloud_to_string(cloud: &PointCloud) -> String {
    let mut buf = Vec::new();
    write_point_cloud(&mut buf, cloud).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("format is ASCII")
}

pub fn read_point_cloud(r: impl BufRead) -> Result<PointCloud> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(1, "missing header line"))??;
    let (frame_id, n) = parse_header(&header)?;
    let mut cloud = PointCloud::new(frame_id)?;
    cloud.points.reserve(n);
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let lineno = idx + 2;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_ascii_whitespace();
        let mut next = |name: &str| -> Result<f64> {
            fields
                .next()
                .ok_or_else(|| Error::parse(lineno, format!("missing field {name}")))?
                .parse::<f64>()
                .map_err(|e| Error::parse(lineno, format!("bad {name}: {e}")))
        };
        let p = Point::new(next("x")?, next("y")?, next("z")?, next("intensity")?);
        if fields.next().is_some() {
            return Err(Error::parse(lineno, "trailing fields"));
        }
        cloud.points.push(p);
    }
    if cloud.len() != n {
        return Err(Error::parse(
            1,
            format!("header count {n} does not match {} points", cloud.len()),
        ));
    }
    Ok(cloud)
}

pub fn point_cloud_from_str(s: &str) -> Result<PointCloud> {
    read_point_cloud(s.as_bytes())
}

fn parse_header(line: &str) -> Result<(String, usize)> {
    let rest = line
        .strip_prefix("# frame=")
        .ok_or_else(|| Error::parse(1, "header must start with '# frame='"))?;
    let (frame, count) = rest
        .rsplit_once(" n=")
        .ok_or_else(|| Error::parse(1, "header missing ' n=' count"))?;
    let n = count
        .parse::<usize>()
        .map_err(|e| Error::parse(1, format!("bad point count: {e}")))?;
    Ok((frame.to_string(), n))
}
