//! Plain-text formats used by the command-line tools.
//!
//! Pose files hold one pose per line: 9 row-major rotation entries, 3
//! position values and a timestamp. Pair files hold an optional label then
//! image xyz and tracker xyz. Transform files are `key = numbers` lines.
//! Blank lines and `#` comments are ignored everywhere.

use std::collections::BTreeMap;

use petnav_core::landmark::LandmarkPair;
use petnav_core::pivot::PoseSample;
use petnav_core::transforms::{BSplineGrid, Rigid};
use petnav_core::Vec3;

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(n, l)| (n + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn numbers(fields: &[&str], line: usize) -> Result<Vec<f64>, String> {
    fields.iter().map(|f| f.parse::<f64>().map_err(|e| format!("line {line}: '{f}': {e}"))).collect()
}

fn fmt_nums(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

pub fn parse_poses(text: &str) -> Result<Vec<PoseSample<f64>>, String> {
    content_lines(text)
        .map(|(n, l)| {
            let fields: Vec<_> = l.split_whitespace().collect();
            let v = numbers(&fields, n)?;
            let rec: [f64; 13] = v.try_into().map_err(|v: Vec<f64>| format!("line {n}: expected 13 numbers, got {}", v.len()))?;
            let pose = PoseSample::from_record(&rec);
            pose.validate().map_err(|e| format!("line {n}: {e}"))?;
            Ok(pose)
        })
        .collect()
}

pub fn format_poses(poses: &[PoseSample<f64>]) -> String {
    poses.iter().map(|p| fmt_nums(p.to_record()) + "\n").collect()
}

pub fn parse_pairs(text: &str) -> Result<Vec<LandmarkPair<f64>>, String> {
    content_lines(text)
        .enumerate()
        .map(|(i, (n, l))| {
            let fields: Vec<_> = l.split_whitespace().collect();
            let (label, rest) = match fields.len() {
                6 => (format!("P{}", i + 1), &fields[..]),
                7 => (fields[0].to_string(), &fields[1..]),
                k => return Err(format!("line {n}: expected 6 numbers and an optional label, got {k} fields")),
            };
            let v = numbers(rest, n)?;
            Ok(LandmarkPair::new(label, Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5])))
        })
        .collect()
}

pub fn format_transform(rigid: &Rigid<f64>, grid: Option<&BSplineGrid<f64>>) -> String {
    let mut out = format!("rigid = {}\n", fmt_nums(rigid.to_array()));
    if let Some(g) = grid {
        out += &format!("grid_dims = {}\n", g.grid_dims.map(|d| d.to_string()).join(" "));
        out += &format!("grid_origin = {}\n", fmt_nums(g.grid_origin.iter().copied()));
        out += &format!("grid_spacing = {}\n", fmt_nums(g.grid_spacing.iter().copied()));
        out += &format!("grid_displacements = {}\n", fmt_nums(g.displacements.iter().flat_map(|d| d.iter().copied())));
    }
    out
}

pub fn parse_transform(text: &str) -> Result<(Rigid<f64>, Option<BSplineGrid<f64>>), String> {
    let mut fields = BTreeMap::new();
    for (n, l) in content_lines(text) {
        let (k, v) = l.split_once('=').ok_or_else(|| format!("line {n}: expected key = values"))?;
        let parts: Vec<_> = v.split_whitespace().collect();
        fields.insert(k.trim().to_string(), numbers(&parts, n)?);
    }
    let rigid = Rigid::from_slice(fields.get("rigid").ok_or("missing rigid")?).map_err(|e| e.to_string())?;
    let Some(dims) = fields.get("grid_dims") else {
        return Ok((rigid, None));
    };
    let vec3 = |k: &str| -> Result<Vec3<f64>, String> {
        let v = fields.get(k).ok_or_else(|| format!("missing {k}"))?;
        (v.len() == 3).then(|| Vec3::new(v[0], v[1], v[2])).ok_or_else(|| format!("{k}: expected 3 numbers"))
    };
    if dims.len() != 3 || dims.iter().any(|d| d.fract() != 0.0 || *d < 0.0) {
        return Err("grid_dims: expected 3 counts".into());
    }
    let disp = fields.get("grid_displacements").ok_or("missing grid_displacements")?;
    if disp.len() % 3 != 0 {
        return Err("grid_displacements: length not a multiple of 3".into());
    }
    let grid = BSplineGrid::new(
        [dims[0] as usize, dims[1] as usize, dims[2] as usize],
        vec3("grid_origin")?,
        vec3("grid_spacing")?,
        disp.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect(),
    )
    .map_err(|e| e.to_string())?;
    Ok((rigid, Some(grid)))
}
