//! XYZ, ASCII PLY and OFF readers and writers.
//!
//! Only vertex positions are kept. Faces and extra vertex properties are
//! skipped. Writers emit a canonical layout that the readers round-trip
//! byte-for-byte.

use std::fmt::Write as _;
use std::path::Path;

use super::{Point, PointCloud};
use crate::error::{Error, Result};

fn text(bytes: &[u8]) -> Result<&str> {
    std::str::from_utf8(bytes).map_err(|e| {
        let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        Error::parse(line, "invalid UTF-8")
    })
}

fn number(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::parse(line, format!("non-numeric token {tok:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("non-finite value {tok:?}")));
    }
    Ok(v)
}

fn count(tok: &str, line: usize) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::parse(line, format!("expected a count, found {tok:?}")))
}

fn triple(tokens: &[&str], line: usize) -> Result<Point> {
    if tokens.len() < 3 {
        return Err(Error::parse(line, format!("expected 3 coordinates, found {}", tokens.len())));
    }
    Ok([number(tokens[0], line)?, number(tokens[1], line)?, number(tokens[2], line)?])
}

fn finish(points: Vec<Point>, last_line: usize) -> Result<PointCloud> {
    PointCloud::new(points).map_err(|e| Error::parse(last_line, e.to_string()))
}

/// One `x y z` triple per line; blank lines and `#` comments are skipped.
pub fn parse_xyz(bytes: &[u8]) -> Result<PointCloud> {
    let src = text(bytes)?;
    let mut points = Vec::new();
    let mut last = 0;
    for (i, raw) in src.lines().enumerate() {
        let line = i + 1;
        last = line;
        let l = raw.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(Error::parse(line, format!("expected 3 coordinates, found {}", toks.len())));
        }
        points.push(triple(&toks, line)?);
    }
    finish(points, last)
}

/// Iterator over significant lines with their 1-based numbers.
struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(src: &'a str) -> Self {
        Lines {
            inner: src.lines().enumerate(),
            last: 0,
        }
    }

    /// Next non-empty line, skipping lines that start with `comment` if given.
    fn next_content(&mut self, comment: Option<&str>) -> Option<(usize, &'a str)> {
        for (i, raw) in self.inner.by_ref() {
            self.last = i + 1;
            let l = raw.trim();
            if l.is_empty() || comment.is_some_and(|c| l.starts_with(c)) {
                continue;
            }
            return Some((i + 1, l));
        }
        None
    }

    fn require(&mut self, comment: Option<&str>, what: &str) -> Result<(usize, &'a str)> {
        let last = self.last;
        self.next_content(comment)
            .ok_or_else(|| Error::parse(last + 1, format!("truncated file: expected {what}")))
    }
}

struct PlyElement {
    name: String,
    count: usize,
    props: Vec<String>,
}

/// ASCII PLY 1.0 with a `vertex` element carrying `x`, `y`, `z` properties.
pub fn parse_ply_ascii(bytes: &[u8]) -> Result<PointCloud> {
    let src = text(bytes)?;
    let mut lines = Lines::new(src);
    let (ln, magic) = lines.require(None, "ply magic")?;
    if magic != "ply" {
        return Err(Error::parse(ln, "missing 'ply' magic"));
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    loop {
        let (ln, l) = lines.require(None, "end_header")?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks[0] {
            "format" => {
                if toks.get(1) != Some(&"ascii") || toks.get(2) != Some(&"1.0") {
                    return Err(Error::parse(ln, format!("unsupported format line {l:?}; only ascii 1.0")));
                }
                saw_format = true;
            }
            "comment" | "obj_info" => {}
            "element" => {
                if toks.len() != 3 {
                    return Err(Error::parse(ln, "malformed element line"));
                }
                elements.push(PlyElement {
                    name: toks[1].to_string(),
                    count: count(toks[2], ln)?,
                    props: Vec::new(),
                });
            }
            "property" => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(ln, "property before any element"))?;
                if toks.get(1) == Some(&"list") {
                    if el.name == "vertex" {
                        return Err(Error::parse(ln, "list properties on vertices are not supported"));
                    }
                    el.props.push(toks.last().copied().unwrap_or_default().to_string());
                } else if toks.len() == 3 {
                    el.props.push(toks[2].to_string());
                } else {
                    return Err(Error::parse(ln, "malformed property line"));
                }
            }
            "end_header" => break,
            other => return Err(Error::parse(ln, format!("unexpected header keyword {other:?}"))),
        }
    }
    if !saw_format {
        return Err(Error::parse(lines.last, "missing format line"));
    }
    let Some(vpos) = elements.iter().position(|e| e.name == "vertex") else {
        return Err(Error::parse(lines.last, "no vertex element"));
    };
    let axis = |name: &str| {
        elements[vpos]
            .props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::parse(lines.last, format!("vertex element lacks property {name}")))
    };
    let (ix, iy, iz) = (axis("x")?, axis("y")?, axis("z")?);
    let nprops = elements[vpos].props.len();

    let mut points = Vec::new();
    for (k, el) in elements.iter().enumerate() {
        for _ in 0..el.count {
            let (ln, l) = lines.require(None, &format!("{} line", el.name))?;
            if k != vpos {
                continue;
            }
            let toks: Vec<&str> = l.split_whitespace().collect();
            if toks.len() != nprops {
                return Err(Error::parse(ln, format!("expected {nprops} vertex values, found {}", toks.len())));
            }
            points.push([number(toks[ix], ln)?, number(toks[iy], ln)?, number(toks[iz], ln)?]);
        }
        if k == vpos {
            break;
        }
    }
    finish(points, lines.last)
}

/// `OFF` header, `V F E` counts, then `V` vertex lines. Faces are ignored.
pub fn parse_off(bytes: &[u8]) -> Result<PointCloud> {
    let src = text(bytes)?;
    let mut lines = Lines::new(src);
    let (ln, head) = lines.require(Some("#"), "OFF header")?;
    let mut toks: Vec<&str> = head.split_whitespace().collect();
    if toks[0] != "OFF" {
        return Err(Error::parse(ln, "missing 'OFF' header"));
    }
    toks.remove(0);
    let (ln, counts) = if toks.is_empty() {
        let (ln, l) = lines.require(Some("#"), "vertex/face/edge counts")?;
        (ln, l.split_whitespace().collect::<Vec<_>>())
    } else {
        (ln, toks)
    };
    if counts.len() != 3 {
        return Err(Error::parse(ln, "expected 'V F E' counts"));
    }
    let nv = count(counts[0], ln)?;
    count(counts[1], ln)?;
    count(counts[2], ln)?;
    let mut points = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = lines.require(Some("#"), "vertex line")?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(Error::parse(ln, format!("expected 3 coordinates, found {}", toks.len())));
        }
        points.push(triple(&toks, ln)?);
    }
    finish(points, lines.last)
}

fn push_point(out: &mut String, p: &Point) {
    let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
}

pub fn write_xyz(pc: &PointCloud) -> String {
    let mut out = String::new();
    for p in pc.points() {
        push_point(&mut out, p);
    }
    out
}

pub fn write_ply_ascii(pc: &PointCloud) -> String {
    let mut out = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        pc.len()
    );
    for p in pc.points() {
        push_point(&mut out, p);
    }
    out
}

pub fn write_off(pc: &PointCloud) -> String {
    let mut out = format!("OFF\n{} 0 0\n", pc.len());
    for p in pc.points() {
        push_point(&mut out, p);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Xyz,
    Ply,
    Off,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Format> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("xyz") | Some("txt") => Ok(Format::Xyz),
            Some("ply") => Ok(Format::Ply),
            Some("off") => Ok(Format::Off),
            _ => Err(Error::Config(format!("{}: unknown point cloud extension", path.display()))),
        }
    }
}

pub fn parse(bytes: &[u8], format: Format) -> Result<PointCloud> {
    match format {
        Format::Xyz => parse_xyz(bytes),
        Format::Ply => parse_ply_ascii(bytes),
        Format::Off => parse_off(bytes),
    }
}

/// Reads a cloud, choosing the parser from the file extension.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    let mut pc = parse(&bytes, Format::from_path(path)?)?;
    pc.name = name;
    Ok(pc)
}

pub fn write_cloud(path: &Path, pc: &PointCloud) -> Result<()> {
    let body = match Format::from_path(path)? {
        Format::Xyz => write_xyz(pc),
        Format::Ply => write_ply_ascii(pc),
        Format::Off => write_off(pc),
    };
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}
