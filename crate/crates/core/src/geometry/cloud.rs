use std::io::{self, BufRead, Write};

use nalgebra::{Matrix3, Vector3};

use super::{GeometryError, Pose};

/// 3D point set with optional per-point covariances (m²).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    covariances: Option<Vec<Matrix3<f64>>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self, GeometryError> {
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(GeometryError::NonFinite("point cloud"));
        }
        Ok(Self {
            points,
            covariances: None,
        })
    }

    pub fn with_covariances(points: Vec<Vector3<f64>>, covariances: Vec<Matrix3<f64>>) -> Result<Self, GeometryError> {
        if points.len() != covariances.len() {
            return Err(GeometryError::CovarianceCount {
                points: points.len(),
                covariances: covariances.len(),
            });
        }
        let mut cloud = Self::new(points)?;
        cloud.covariances = Some(covariances);
        Ok(cloud)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn covariances(&self) -> Option<&[Matrix3<f64>]> {
        self.covariances.as_deref()
    }

    pub fn without_covariances(mut self) -> Self {
        self.covariances = None;
        self
    }

    /// Applies `pose` to every point; covariances rotate as `R C Rᵀ`.
    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        let r = pose.rotation();
        PointCloud {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            covariances: self
                .covariances
                .as_ref()
                .map(|cs| cs.iter().map(|c| r * c * r.transpose()).collect()),
        }
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let sum: Vector3<f64> = self.points.iter().sum();
        Some(sum / self.points.len() as f64)
    }

    /// Axis-aligned bounds `(min, max)`.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| (lo.inf(p), hi.sup(p))))
    }

    /// Keeps the points for which `keep` returns true (covariances follow).
    pub fn filtered<F: Fn(usize, &Vector3<f64>) -> bool>(&self, keep: F) -> PointCloud {
        let idx: Vec<usize> = (0..self.points.len()).filter(|&i| keep(i, &self.points[i])).collect();
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            covariances: self.covariances.as_ref().map(|cs| idx.iter().map(|&i| cs[i]).collect()),
        }
    }

    /// ASCII PLY with `x y z` vertex properties.
    pub fn write_ply<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "ply\nformat ascii 1.0\nelement vertex {}", self.points.len())?;
        writeln!(out, "property double x\nproperty double y\nproperty double z\nend_header")?;
        for p in &self.points {
            writeln!(out, "{} {} {}", p.x, p.y, p.z)?;
        }
        Ok(())
    }

    pub fn read_ply<R: BufRead>(input: R) -> Result<Self, GeometryError> {
        let mut lines = input.lines();
        let mut vertex_count = None;
        let mut props: Vec<String> = Vec::new();
        let mut in_vertex = false;
        let bad = |m: &str| GeometryError::Ply(m.to_string());
        match lines.next() {
            Some(Ok(l)) if l.trim() == "ply" => {}
            _ => return Err(bad("missing ply magic")),
        }
        loop {
            let line = lines.next().ok_or_else(|| bad("unterminated header"))?.map_err(|e| bad(&e.to_string()))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.as_slice() {
                ["format", fmt, ..] if *fmt != "ascii" => return Err(bad("only ascii PLY is supported")),
                ["element", "vertex", n] => {
                    vertex_count = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
                    in_vertex = true;
                }
                ["element", ..] => in_vertex = false,
                ["property", .., name] if in_vertex => props.push(name.to_string()),
                ["end_header"] => break,
                _ => {}
            }
        }
        let n = vertex_count.ok_or_else(|| bad("no vertex element"))?;
        let col = |name: &str| props.iter().position(|p| p == name).ok_or_else(|| bad("missing x/y/z property"));
        let (ix, iy, iz) = (col("x")?, col("y")?, col("z")?);
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let line = lines.next().ok_or_else(|| bad("truncated vertex list"))?.map_err(|e| bad(&e.to_string()))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| bad("bad number")))
                .collect::<Result<_, _>>()?;
            let get = |i: usize| vals.get(i).copied().ok_or_else(|| bad("short vertex row"));
            points.push(Vector3::new(get(ix)?, get(iy)?, get(iz)?));
        }
        PointCloud::new(points)
    }
}
