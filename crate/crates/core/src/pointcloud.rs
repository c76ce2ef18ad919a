//! Labeled point clouds: text I/O, bounding boxes and farthest point sampling.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Squared Euclidean distance.
#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// A point cloud with optional per-point part labels.
///
/// Construction validates that the cloud is non-empty, every coordinate is
/// finite and the label list (if any) has one entry per point.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPointCloud {
    points: Vec<Point3>,
    labels: Option<Vec<u32>>,
}

impl LabeledPointCloud {
    pub fn new(points: Vec<Point3>, labels: Option<Vec<u32>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::ZeroPoints);
        }
        if let Some(labels) = &labels {
            if labels.len() != points.len() {
                return Err(Error::Shape(format!(
                    "{} labels for {} points",
                    labels.len(),
                    points.len()
                )));
            }
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!("coordinate of point {i}")));
        }
        Ok(Self { points, labels })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Sub-cloud made of the given indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(points, labels)
    }

    /// Returns a copy with labels replaced.
    pub fn with_labels(&self, labels: Option<Vec<u32>>) -> Result<Self> {
        Self::new(self.points.clone(), labels)
    }
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn extent(&self) -> Point3 {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    /// Widens zero-extent axes by `pad` so that every extent is positive.
    pub fn padded(&self, pad: f64) -> Aabb {
        let mut out = *self;
        for a in 0..3 {
            if out.max[a] - out.min[a] <= 0.0 {
                out.max[a] = out.min[a] + pad;
            }
        }
        out
    }

    /// Maps `p` into `[-1, 1]` per axis (anisotropic). Zero-extent axes map to 0.
    pub fn normalize(&self, p: &Point3) -> Point3 {
        let mut out = [0.0; 3];
        for a in 0..3 {
            let e = self.max[a] - self.min[a];
            out[a] = if e > 0.0 {
                2.0 * (p[a] - self.min[a]) / e - 1.0
            } else {
                0.0
            };
        }
        out
    }
}

pub fn bounding_box(cloud: &LabeledPointCloud) -> Aabb {
    // `LabeledPointCloud` is never empty.
    let mut min = cloud.points[0];
    let mut max = cloud.points[0];
    for p in &cloud.points[1..] {
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    Aabb { min, max }
}

/// Reads "x y z [label]" lines. Blank lines are skipped; CRLF is accepted.
pub fn load_cloud(path: impl AsRef<Path>, has_labels: bool) -> Result<LabeledPointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cloud(&text, has_labels)
}

pub fn parse_cloud(text: &str, has_labels: bool) -> Result<LabeledPointCloud> {
    let want = if has_labels { 4 } else { 3 };
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != want {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {want} fields, found {}", fields.len()),
            });
        }
        let mut p = [0.0; 3];
        for (a, f) in fields[..3].iter().enumerate() {
            p[a] = f.parse::<f64>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad coordinate {f:?}"),
            })?;
            if !p[a].is_finite() {
                return Err(Error::NonFinite(format!("coordinate on line {lineno}")));
            }
        }
        points.push(p);
        if has_labels {
            let l = fields[3].parse::<u32>().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad label {:?}", fields[3]),
            })?;
            labels.push(l);
        }
    }
    LabeledPointCloud::new(points, has_labels.then_some(labels))
}

/// Text form of a cloud. Coordinates use the shortest representation that
/// parses back to the same `f64`.
pub fn format_cloud(cloud: &LabeledPointCloud) -> String {
    let mut out = String::with_capacity(cloud.n() * 32);
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
        if let Some(l) = &cloud.labels {
            let _ = write!(out, " {}", l[i]);
        }
        out.push('\n');
    }
    out
}

pub fn save_cloud(cloud: &LabeledPointCloud, path: impl AsRef<Path>) -> Result<()> {
    crate::formats::write_atomic(path.as_ref(), format_cloud(cloud).as_bytes())
}

/// Greedy farthest point sampling.
///
/// Starts at `seed mod n`; every further pick maximizes the distance to the
/// closest already-selected point, ties going to the lowest index.
pub fn farthest_point_sample(
    cloud: &LabeledPointCloud,
    count: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = cloud.n();
    if count == 0 || count > n {
        return Err(Error::InvalidArgument(format!(
            "sample count {count} outside 1..={n}"
        )));
    }
    let pts = cloud.points();
    let start = (seed % n as u64) as usize;
    let mut selected = vec![false; n];
    let mut nearest = vec![f64::INFINITY; n];
    let mut order = Vec::with_capacity(count);
    let mut current = start;
    loop {
        selected[current] = true;
        order.push(current);
        if order.len() == count {
            break;
        }
        let c = pts[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            if selected[i] {
                continue;
            }
            let d = dist2(&pts[i], &c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > best_d {
                best_d = nearest[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[Point3]) -> LabeledPointCloud {
        LabeledPointCloud::new(points.to_vec(), None).unwrap()
    }

    #[test]
    fn parses_labeled_file() {
        let c = parse_cloud("0 0 0 1\n1 1 1 2", true).unwrap();
        assert_eq!(c.n(), 2);
        assert_eq!(c.labels().unwrap(), &[1, 2]);
        assert_eq!(c.points()[1], [1.0, 1.0, 1.0]);
    }

    #[test]
    fn accepts_crlf_and_blank_lines() {
        let c = parse_cloud("0 0 0\r\n\r\n1 2 3\r\n", false).unwrap();
        assert_eq!(c.points(), &[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
    }

    #[test]
    fn empty_file_is_zero_points() {
        assert!(matches!(parse_cloud("", false), Err(Error::ZeroPoints)));
        assert!(matches!(parse_cloud("\n  \n", true), Err(Error::ZeroPoints)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match parse_cloud("0 0 abc", false) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
        match parse_cloud("0 0 0\n1 1", false) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            parse_cloud("0 0 0 -1", true),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(parse_cloud("0 nan 0", false), Err(Error::NonFinite(_))));
        assert!(matches!(parse_cloud("inf 0 0", false), Err(Error::NonFinite(_))));
    }

    #[test]
    fn missing_file() {
        let err = load_cloud("/nonexistent/definitely/not/here.txt", false).unwrap_err();
        assert_eq!(err.category(), "io");
    }

    #[test]
    fn bounding_box_extrema() {
        let b = bounding_box(&cloud(&[[2.0, 3.0, 4.0]]));
        assert_eq!(b.min, [2.0, 3.0, 4.0]);
        assert_eq!(b.max, [2.0, 3.0, 4.0]);

        let b = bounding_box(&cloud(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]));
        assert_eq!(b.min, [0.0, 0.0, 0.0]);
        assert_eq!(b.max, [1.0, 2.0, 3.0]);

        let b = bounding_box(&cloud(&[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]));
        assert_eq!(b.extent()[0], 2.0);
    }

    #[test]
    fn fps_square_picks_diagonal() {
        let c = cloud(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
        ]);
        assert_eq!(farthest_point_sample(&c, 2, 0).unwrap(), vec![0, 2]);
        // Remaining two corners are tied; the lower index wins.
        assert_eq!(farthest_point_sample(&c, 4, 0).unwrap(), vec![0, 2, 1, 3]);
    }

    #[test]
    fn fps_count_bounds() {
        let c = cloud(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(farthest_point_sample(&c, 0, 0).is_err());
        assert!(farthest_point_sample(&c, 3, 0).is_err());
        let all = farthest_point_sample(&c, 2, 7).unwrap();
        assert_eq!(all, vec![1, 0]);
    }

    #[test]
    fn fps_with_duplicates_stays_distinct() {
        let c = cloud(&[[0.0; 3]; 5]);
        let mut idx = farthest_point_sample(&c, 5, 3).unwrap();
        assert_eq!(idx[0], 3);
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn select_keeps_labels() {
        let c = parse_cloud("0 0 0 5\n1 0 0 6\n2 0 0 7", true).unwrap();
        let s = c.select(&[2, 0]).unwrap();
        assert_eq!(s.labels().unwrap(), &[7, 5]);
        assert_eq!(s.points()[0], [2.0, 0.0, 0.0]);
    }
}
