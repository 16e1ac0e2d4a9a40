//! ASCII PLY and headerless CSV point-cloud files, plus pose JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::cloud::PointCloud;
use super::rigid::{Pose, PoseRecord, RigidTransform};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// One point per line, comma separated, no header.
pub fn cloud_to_csv<T: Real>(cloud: &PointCloud<T>) -> String {
    let mut out = String::with_capacity(cloud.len() * cloud.dim() * 20);
    let m = cloud.matrix();
    for i in 0..cloud.len() {
        for j in 0..cloud.dim() {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", m[(i, j)].to_f64_lossy());
        }
        out.push('\n');
    }
    out
}

pub fn cloud_from_csv<T: Real>(text: &str, context: &str) -> Result<PointCloud<T>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| parse_coord::<T>(f.trim(), context, lineno + 1))
            .collect::<Result<Vec<T>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(context, "no points"));
    }
    PointCloud::from_rows(&rows).map_err(|e| Error::parse(context, e.to_string()))
}

fn parse_coord<T: Real>(field: &str, context: &str, line: usize) -> Result<T> {
    let v: f64 = field
        .parse()
        .map_err(|_| Error::parse(context, format!("line {line}: `{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(context, format!("line {line}: non-finite coordinate")));
    }
    Ok(T::lit(v))
}

pub fn cloud_to_ply<T: Real>(cloud: &PointCloud<T>) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    for name in axis_names(cloud.dim()) {
        let _ = writeln!(out, "property double {name}");
    }
    out.push_str("end_header\n");
    let m = cloud.matrix();
    for i in 0..cloud.len() {
        for j in 0..cloud.dim() {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", m[(i, j)].to_f64_lossy());
        }
        out.push('\n');
    }
    out
}

fn axis_names(dim: usize) -> Vec<String> {
    (0..dim)
        .map(|j| match j {
            0 => "x".to_string(),
            1 => "y".to_string(),
            2 => "z".to_string(),
            _ => format!("c{j}"),
        })
        .collect()
}

/// Parses an ASCII PLY file. Only the `vertex` element is read; its `x y z`
/// properties are kept and any other per-vertex properties are ignored.
pub fn cloud_from_ply<T: Real>(text: &str, context: &str) -> Result<PointCloud<T>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::parse(context, "missing `ply` magic"));
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut seen_vertex = false;
    let mut skip_before = 0usize;
    let mut props: Vec<String> = Vec::new();
    let mut header_done = false;
    for line in lines.by_ref() {
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(Error::parse(context, format!("unsupported PLY format `{other}`")));
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| Error::parse(context, format!("bad element count `{count}`")))?;
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(count);
                    seen_vertex = true;
                } else if !seen_vertex {
                    skip_before += count;
                }
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(Error::parse(context, "list properties on vertices are not supported"));
                }
            }
            ["property", ty, name] => {
                if in_vertex {
                    if !matches!(*ty, "float" | "double" | "float32" | "float64") && ["x", "y", "z"].contains(name) {
                        return Err(Error::parse(context, format!("coordinate `{name}` has non-float type `{ty}`")));
                    }
                    props.push(name.to_string());
                }
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            other => {
                return Err(Error::parse(context, format!("unexpected header line `{}`", other.join(" "))));
            }
        }
    }
    if !header_done {
        return Err(Error::parse(context, "missing end_header"));
    }
    let count = vertex_count.ok_or_else(|| Error::parse(context, "no vertex element"))?;
    let axes: Vec<usize> = ["x", "y", "z"]
        .iter()
        .map(|a| {
            props
                .iter()
                .position(|p| p == a)
                .ok_or_else(|| Error::parse(context, format!("vertex element lacks `{a}`")))
        })
        .collect::<Result<_>>()?;
    let mut body = lines.filter(|l| !l.trim().is_empty()).skip(skip_before);
    let mut rows = Vec::with_capacity(count);
    for i in 0..count {
        let line = body
            .next()
            .ok_or_else(|| Error::parse(context, format!("expected {count} vertices, found {i}")))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != props.len() {
            return Err(Error::parse(
                context,
                format!("vertex {i} has {} fields, header declares {}", fields.len(), props.len()),
            ));
        }
        let row = axes
            .iter()
            .map(|&a| parse_coord::<T>(fields[a], context, i + 1))
            .collect::<Result<Vec<T>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(context, "no vertices"));
    }
    PointCloud::from_rows(&rows).map_err(|e| Error::parse(context, e.to_string()))
}

/// Reads `.ply` or `.csv` (by extension).
pub fn read_cloud<T: Real>(path: &Path) -> Result<PointCloud<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let context = path.display().to_string();
    match extension(path).as_deref() {
        Some("ply") => cloud_from_ply(&text, &context),
        Some("csv") | Some("txt") => cloud_from_csv(&text, &context),
        _ => Err(Error::parse(context, "unknown point-cloud extension (expected .ply or .csv)")),
    }
}

pub fn write_cloud<T: Real>(path: &Path, cloud: &PointCloud<T>) -> Result<()> {
    let text = match extension(path).as_deref() {
        Some("csv") | Some("txt") => cloud_to_csv(cloud),
        _ => cloud_to_ply(cloud),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn extension(path: &Path) -> Option<String> {
    path.extension().map(|e| e.to_string_lossy().to_ascii_lowercase())
}

pub fn pose_to_json<T: Real>(pose: &Pose<T>) -> Result<String> {
    Ok(serde_json::to_string(&pose.to_record())?)
}

pub fn pose_from_json<T: Real>(text: &str) -> Result<Pose<T>> {
    let rec: PoseRecord = serde_json::from_str(text)?;
    Pose::from_record(&rec)
}

pub fn transform_to_json<T: Real>(t: &RigidTransform<T>) -> Result<String> {
    Ok(serde_json::to_string(&t.to_record())?)
}

pub fn transform_from_json<T: Real>(text: &str) -> Result<RigidTransform<T>> {
    let rec: PoseRecord = serde_json::from_str(text)?;
    RigidTransform::from_record(&rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn ply_and_csv_round_trip(rows in prop::collection::vec(prop::array::uniform3(-1e6f64..1e6), 1..40)) {
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r.to_vec()).collect();
            let c = PointCloud::from_rows(&rows).unwrap();
            prop_assert_eq!(&cloud_from_ply::<f64>(&cloud_to_ply(&c), "t").unwrap(), &c);
            prop_assert_eq!(&cloud_from_csv::<f64>(&cloud_to_csv(&c), "t").unwrap(), &c);
        }
    }

    #[test]
    fn ply_with_extra_properties() {
        let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nend_header\n1 2 3 255\n4 5 6 0\n";
        let c = cloud_from_ply::<f64>(text, "t").unwrap();
        assert_eq!(c.to_rows(), vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
    }

    #[test]
    fn corrupt_ply_is_rejected() {
        for text in [
            "plx\n",
            "ply\nformat binary_little_endian 1.0\nelement vertex 1\nend_header\n",
            "ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty double y\nproperty double z\nend_header\n1 2 3\n",
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nend_header\n1 2 nope\n",
        ] {
            assert!(matches!(cloud_from_ply::<f64>(text, "t"), Err(Error::Parse { .. })), "{text}");
        }
    }

    #[test]
    fn pose_json_shape() {
        let json = r#"{"position":[1.0,2.0,3.0],"orientation":[1.0,0.0,0.0,0.0]}"#;
        let p: Pose<f64> = pose_from_json(json).unwrap();
        assert_eq!(p.position, nalgebra::Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(pose_to_json(&p).unwrap(), json);
    }
}
