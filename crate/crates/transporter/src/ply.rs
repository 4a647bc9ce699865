//! ASCII PLY point clouds: one `vertex` element with float `x y z` and an
//! optional `uchar part` mask.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use transporter_core::linalg::Vec3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub part: Option<Vec<bool>>,
}

/// Parse failure at a 1-based line.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

fn fail<T>(line: usize, msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError {
        line,
        msg: msg.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Role {
    X,
    Y,
    Z,
    Part,
    Ignored,
}

const FLOAT_TYPES: &[&str] = &["float", "float32", "double", "float64"];
const UCHAR_TYPES: &[&str] = &["uchar", "uint8"];
const SCALAR_TYPES: &[&str] = &[
    "char", "int8", "uchar", "uint8", "short", "int16", "ushort", "uint16", "int", "int32", "uint",
    "uint32", "float", "float32", "double", "float64",
];

/// Serializes a cloud. Coordinates are written at `f32` precision.
pub fn to_string(points: &[Vec3], part: Option<&[bool]>) -> String {
    let mut s = String::with_capacity(48 + points.len() * 32);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", points.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    if part.is_some() {
        s.push_str("property uchar part\n");
    }
    s.push_str("end_header\n");
    for (i, p) in points.iter().enumerate() {
        let _ = write!(s, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
        if let Some(mask) = part {
            let _ = write!(s, " {}", u8::from(mask[i]));
        }
        s.push('\n');
    }
    s
}

pub fn parse(text: &str) -> Result<PointCloud, ParseError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        Some((n, _)) => return fail(n, "missing `ply` magic"),
        None => return fail(1, "empty file"),
    }
    let mut count: Option<usize> = None;
    let mut roles = Vec::new();
    let mut header_line = 1;
    let mut saw_format = false;
    loop {
        let Some((n, line)) = lines.next() else {
            return fail(header_line + 1, "header ended without `end_header`");
        };
        header_line = n;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", "1.0"] => saw_format = true,
            ["format", other, ..] => {
                return fail(n, format!("unsupported format `{other}`, only ascii 1.0"))
            }
            ["element", "vertex", c] => {
                if count.is_some() {
                    return fail(n, "duplicate vertex element");
                }
                let c: usize = c.parse().map_err(|_| ParseError {
                    line: n,
                    msg: format!("bad vertex count `{c}`"),
                })?;
                if c == 0 {
                    return fail(n, "empty point cloud");
                }
                count = Some(c);
            }
            ["element", name, _] => return fail(n, format!("unsupported element `{name}`")),
            ["property", "list", ..] => return fail(n, "list properties are not supported"),
            ["property", ty, name] => {
                if count.is_none() {
                    return fail(n, "property before element");
                }
                if !SCALAR_TYPES.contains(ty) {
                    return fail(n, format!("unknown property type `{ty}`"));
                }
                let role = match *name {
                    "x" => Role::X,
                    "y" => Role::Y,
                    "z" => Role::Z,
                    "part" => Role::Part,
                    _ => Role::Ignored,
                };
                match role {
                    Role::X | Role::Y | Role::Z if !FLOAT_TYPES.contains(ty) => {
                        return fail(n, format!("coordinate `{name}` must be a float type"))
                    }
                    Role::Part if !UCHAR_TYPES.contains(ty) => {
                        return fail(n, "`part` must be uchar")
                    }
                    _ => {}
                }
                if role != Role::Ignored && roles.contains(&role) {
                    return fail(n, format!("duplicate property `{name}`"));
                }
                roles.push(role);
            }
            ["end_header"] => break,
            _ => return fail(n, format!("unrecognized header line `{line}`")),
        }
    }
    if !saw_format {
        return fail(header_line, "missing `format` line");
    }
    let Some(count) = count else {
        return fail(header_line, "no vertex element");
    };
    for (r, name) in [(Role::X, "x"), (Role::Y, "y"), (Role::Z, "z")] {
        if !roles.contains(&r) {
            return fail(header_line, format!("missing property `{name}`"));
        }
    }
    let has_part = roles.contains(&Role::Part);
    let mut points = Vec::with_capacity(count);
    let mut part = has_part.then(|| Vec::with_capacity(count));
    let mut last = header_line;
    for (n, line) in lines {
        last = n;
        if line.is_empty() {
            continue;
        }
        if points.len() == count {
            return fail(n, format!("data after the {count} declared vertices"));
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.len() != roles.len() {
            return fail(
                n,
                format!("expected {} values, found {}", roles.len(), words.len()),
            );
        }
        let mut p = [0.0; 3];
        for (w, role) in words.iter().zip(&roles) {
            let axis = match role {
                Role::X => 0,
                Role::Y => 1,
                Role::Z => 2,
                Role::Part => {
                    let v = match *w {
                        "0" => false,
                        "1" => true,
                        _ => return fail(n, format!("part flag must be 0 or 1, found `{w}`")),
                    };
                    part.as_mut().expect("has part").push(v);
                    continue;
                }
                Role::Ignored => continue,
            };
            let v: f64 = w.parse().map_err(|_| ParseError {
                line: n,
                msg: format!("bad number `{w}`"),
            })?;
            if !v.is_finite() {
                return fail(n, format!("non-finite coordinate `{w}`"));
            }
            p[axis] = v;
        }
        points.push(p);
    }
    if points.len() < count {
        return fail(
            last + 1,
            format!("expected {count} vertices, found {}", points.len()),
        );
    }
    Ok(PointCloud { points, part })
}

pub fn read(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text).map_err(|e| Error::Ply {
        path: path.to_path_buf(),
        line: e.line,
        msg: e.msg,
    })
}

pub fn write(path: &Path, points: &[Vec3], part: Option<&[bool]>) -> Result<()> {
    if let Some(mask) = part {
        if mask.len() != points.len() {
            return Err(Error::Format(format!(
                "part mask has {} entries for {} points",
                mask.len(),
                points.len()
            )));
        }
    }
    fs::write(path, to_string(points, part)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_order_and_mask() {
        let s = to_string(&[[0.5, -0.25, 1.0]], Some(&[true]));
        assert_eq!(
            s,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar part\nend_header\n0.5 -0.25 1 1\n"
        );
    }

    #[test]
    fn extra_columns_are_skipped() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty uchar red\nproperty float y\nproperty float z\nend_header\n1 255 2 3\n";
        let c = parse(text).unwrap();
        assert_eq!(c.points, vec![[1.0, 2.0, 3.0]]);
        assert_eq!(c.part, None);
    }

    #[test]
    fn errors_name_the_line() {
        let cases = [
            ("plx\n", 1),
            ("ply\nformat binary_little_endian 1.0\n", 2),
            ("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n1 2\n", 9),
            ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 nan\n", 8),
            ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n4 5 6\n", 9),
            ("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n", 9),
            ("ply\nformat ascii 1.0\nelement vertex 1\nproperty int x\n", 4),
            ("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty uchar part\nend_header\n1 2 3 2\n", 9),
        ];
        for (text, line) in cases {
            let e = parse(text).unwrap_err();
            assert_eq!(e.line, line, "{text:?}: {e}");
        }
    }
}
