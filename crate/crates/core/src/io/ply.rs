use std::fmt::Write as _;
use std::path::Path;

use super::{read_bytes, write_bytes};
use crate::error::{CoreError, Result};
use crate::metrics::PointCloud;

/// ASCII PLY with `double` coordinates. Values are printed in shortest
/// round-trip form, so reading the file back reproduces every bit.
pub fn write_ply(path: &Path, cloud: &PointCloud, intensity: Option<&[f64]>) -> Result<()> {
    if let Some(i) = intensity {
        if i.len() != cloud.points.len() {
            return Err(CoreError::format(path, "intensity count does not match vertex count"));
        }
    }
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.points.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if intensity.is_some() {
        s.push_str("property double intensity\n");
    }
    s.push_str("end_header\n");
    for (k, p) in cloud.points.iter().enumerate() {
        let _ = write!(s, "{} {} {}", p[0], p[1], p[2]);
        if let Some(i) = intensity {
            let _ = write!(s, " {}", i[k]);
        }
        s.push('\n');
    }
    write_bytes(path, s.as_bytes())
}

/// Reads the vertex positions of an ASCII PLY written by [`write_ply`] or any
/// file whose first three vertex properties are x, y, z.
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let bytes = read_bytes(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| CoreError::format(path, "not UTF-8 text"))?;
    parse(text).map_err(|msg| CoreError::format(path, msg))
}

fn parse(text: &str) -> std::result::Result<PointCloud, String> {
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err("missing `ply` magic line".into());
    }
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let line = lines.next().ok_or("header has no end_header")?.trim();
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] if *fmt != "ascii" => return Err(format!("unsupported format `{fmt}`")),
            ["element", "vertex", n] => count = Some(n.parse::<usize>().map_err(|_| format!("bad vertex count `{n}`"))?),
            ["property", _, name] if count.is_some() => props.push(name.to_string()),
            _ => {}
        }
    }
    let count = count.ok_or("no vertex element")?;
    if props.len() < 3 || props[..3] != ["x", "y", "z"] {
        return Err(format!("expected x y z as first vertex properties, got {props:?}"));
    }
    let mut points = Vec::with_capacity(count);
    for k in 0..count {
        let line = lines.next().ok_or(format!("file ends after {k} of {count} vertices"))?;
        let mut it = line.split_whitespace().map(str::parse::<f64>);
        let mut p = [0.0; 3];
        for v in &mut p {
            *v = it.next().and_then(|r| r.ok()).ok_or(format!("bad vertex line {k}"))?;
        }
        points.push(p);
    }
    Ok(PointCloud { points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let cloud = PointCloud { points: vec![[0.1, -2.0, 3.0]] };
        write_ply(&path, &cloud, None).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nend_header\n0.1 -2 3\n"
        );
    }

    #[test]
    fn roundtrip_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let cloud = PointCloud { points: vec![[1.0 / 3.0, 2e-300, -7.123456789012345e12], [0.0, 1.0, f64::MAX]] };
        write_ply(&path, &cloud, Some(&[0.5, 0.25])).unwrap();
        assert_eq!(read_ply(&path).unwrap(), cloud);
    }
}
