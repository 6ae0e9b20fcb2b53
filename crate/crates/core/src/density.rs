//! Point annotations, dataset records and point-to-density conversion.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Default Gaussian kernel width in pixels.
pub const DEFAULT_SIGMA: f64 = 4.0;

/// Kernel support half-width in units of sigma.
pub const TRUNCATE_SIGMAS: f64 = 4.0;

/// Head center in pixel coordinates: origin top-left, `x` rightward, pixel
/// `(i, j)` centered at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointAnnotation {
    pub points: Vec<Point>,
}

impl PointAnnotation {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the first point outside `[0, width) x [0, height)`.
    pub fn first_out_of_bounds(&self, height: usize, width: usize) -> Option<usize> {
        self.points.iter().position(|p| {
            !(p.x.is_finite() && p.y.is_finite())
                || p.x < 0.0
                || p.y < 0.0
                || p.x >= width as f64
                || p.y >= height as f64
        })
    }

    pub fn check_bounds(&self, image: &str, height: usize, width: usize) -> Result<()> {
        match self.first_out_of_bounds(height, width) {
            None => Ok(()),
            Some(index) => Err(Error::OutOfBoundsPoint {
                image: image.to_string(),
                index,
                x: self.points[index].x,
                y: self.points[index].y,
                width,
                height,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub image_path: PathBuf,
    pub height: usize,
    pub width: usize,
    pub annotation: PointAnnotation,
    pub split: Split,
}

impl DatasetRecord {
    pub fn load_image(&self) -> Result<Raster> {
        let img = Raster::read_png(&self.image_path)?;
        if img.height() != self.height || img.width() != self.width {
            return Err(Error::Shape(format!(
                "{} is {}x{}, annotation says {}x{}",
                self.image_path.display(),
                img.height(),
                img.width(),
                self.height,
                self.width
            )));
        }
        Ok(img)
    }
}

#[derive(Serialize)]
struct ImageEntry<'a> {
    path: String,
    height: usize,
    width: usize,
    points: Vec<[f64; 2]>,
    split: &'a Split,
}

#[derive(Serialize)]
struct AnnotationFile<'a> {
    images: Vec<ImageEntry<'a>>,
}

/// Serializes records to the annotation JSON schema, with paths made relative
/// to `base` when possible.
pub fn annotations_json(records: &[DatasetRecord], base: &Path) -> Result<String> {
    let images = records
        .iter()
        .map(|r| ImageEntry {
            path: r
                .image_path
                .strip_prefix(base)
                .unwrap_or(&r.image_path)
                .to_string_lossy()
                .replace('\\', "/"),
            height: r.height,
            width: r.width,
            points: r.annotation.points.iter().map(|p| [p.x, p.y]).collect(),
            split: &r.split,
        })
        .collect();
    Ok(serde_json::to_string_pretty(&AnnotationFile { images })? + "\n")
}

pub fn write_annotations(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    fs::write(path, annotations_json(records, base)?)?;
    Ok(())
}

fn field_usize(obj: &serde_json::Map<String, Value>, key: &str, at: &str) -> Result<usize> {
    obj.get(key)
        .ok_or_else(|| Error::schema(format!("{at}.{key}"), "missing"))?
        .as_u64()
        .map(|v| v as usize)
        .ok_or_else(|| Error::schema(format!("{at}.{key}"), "expected a non-negative integer"))
}

/// Reads the annotation JSON
/// `{"images": [{"path", "height", "width", "points": [[x, y], ...], "split"?}]}`.
///
/// Relative image paths resolve against the annotation file's directory. The
/// optional `split` key defaults to `train`.
pub fn load_annotations(path: &Path) -> Result<Vec<DatasetRecord>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let root: Value =
        serde_json::from_str(&text).map_err(|e| Error::schema("$", format!("invalid JSON: {e}")))?;
    parse_annotations(&root, path.parent().unwrap_or(Path::new(".")))
}

pub fn parse_annotations(root: &Value, base: &Path) -> Result<Vec<DatasetRecord>> {
    let images = root
        .get("images")
        .ok_or_else(|| Error::schema("images", "missing"))?
        .as_array()
        .ok_or_else(|| Error::schema("images", "expected an array"))?;
    let mut records = Vec::with_capacity(images.len());
    for (i, entry) in images.iter().enumerate() {
        let at = format!("images[{i}]");
        let obj = entry.as_object().ok_or_else(|| Error::schema(&at, "expected an object"))?;
        for key in obj.keys() {
            if !matches!(key.as_str(), "path" | "height" | "width" | "points" | "split") {
                return Err(Error::schema(format!("{at}.{key}"), "unknown field"));
            }
        }
        let rel = obj
            .get("path")
            .ok_or_else(|| Error::schema(format!("{at}.path"), "missing"))?
            .as_str()
            .ok_or_else(|| Error::schema(format!("{at}.path"), "expected a string"))?;
        let height = field_usize(obj, "height", &at)?;
        let width = field_usize(obj, "width", &at)?;
        let raw_points = obj
            .get("points")
            .ok_or_else(|| Error::schema(format!("{at}.points"), "missing"))?
            .as_array()
            .ok_or_else(|| Error::schema(format!("{at}.points"), "expected an array"))?;
        let mut points = Vec::with_capacity(raw_points.len());
        for (j, p) in raw_points.iter().enumerate() {
            let pair = p
                .as_array()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| Error::schema(format!("{at}.points[{j}]"), "expected [x, y]"))?;
            let coord = |k: usize| {
                pair[k]
                    .as_f64()
                    .ok_or_else(|| Error::schema(format!("{at}.points[{j}][{k}]"), "expected a number"))
            };
            points.push(Point::new(coord(0)?, coord(1)?));
        }
        let split = match obj.get("split") {
            None => Split::Train,
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|_| Error::schema(format!("{at}.split"), "expected \"train\" or \"test\""))?,
        };
        let annotation = PointAnnotation::new(points);
        annotation.check_bounds(rel, height, width)?;
        let rel_path = Path::new(rel);
        let image_path = if rel_path.is_absolute() { rel_path.to_path_buf() } else { base.join(rel_path) };
        records.push(DatasetRecord { image_path, height, width, annotation, split });
    }
    Ok(records)
}

/// Adds one truncated, renormalized Gaussian blob of unit mass centered at `p`.
fn splat(out: &mut Raster, p: Point, sigma: f64) {
    let (h, w) = (out.height(), out.width());
    let r = TRUNCATE_SIGMAS * sigma;
    let x0 = ((p.x - r).ceil().max(0.0)) as usize;
    let x1 = ((p.x + r).floor() as usize).min(w - 1);
    let y0 = ((p.y - r).ceil().max(0.0)) as usize;
    let y1 = ((p.y + r).floor() as usize).min(h - 1);
    let inv = 1.0 / (2.0 * sigma * sigma);
    let gx: Vec<f64> = (x0..=x1).map(|i| (-(i as f64 - p.x).powi(2) * inv).exp()).collect();
    let gy: Vec<f64> = (y0..=y1).map(|j| (-(j as f64 - p.y).powi(2) * inv).exp()).collect();
    let mass: f64 = gx.iter().sum::<f64>() * gy.iter().sum::<f64>();
    for (dy, &vy) in gy.iter().enumerate() {
        for (dx, &vx) in gx.iter().enumerate() {
            let (y, x) = (y0 + dy, x0 + dx);
            let v = out.get(y, x, 0) + vx * vy / mass;
            out.set(y, x, 0, v);
        }
    }
}

/// Sum of per-head Gaussian blobs, each truncated to a `4 sigma` square window
/// and renormalized so it carries unit mass inside the raster.
pub fn points_to_density(ann: &PointAnnotation, height: usize, width: usize, sigma: f64) -> Result<Raster> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidSigma(sigma));
    }
    ann.check_bounds("<annotation>", height, width)?;
    let mut out = Raster::zeros(height, width, 1);
    for &p in &ann.points {
        splat(&mut out, p, sigma);
    }
    Ok(out)
}

/// Predicted or ground-truth count of a density map.
pub fn density_count(d: &Raster) -> f64 {
    d.sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("ann.json");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn empty_image_list_gives_no_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), r#"{"images": []}"#);
        assert!(load_annotations(&p).unwrap().is_empty());
    }

    #[test]
    fn fixture_with_two_images() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            r#"{"images": [
                {"path": "a.png", "height": 10, "width": 20, "points": [[1, 2], [3.5, 4.25], [19.9, 9.9]]},
                {"path": "b.png", "height": 8, "width": 8, "points": [], "split": "test"}
            ]}"#,
        );
        let recs = load_annotations(&p).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].annotation.len(), 3);
        assert_eq!(recs[1].annotation.len(), 0);
        assert_eq!(recs[0].split, Split::Train);
        assert_eq!(recs[1].split, Split::Test);
        assert_eq!(recs[0].image_path, dir.path().join("a.png"));
    }

    #[test]
    fn point_on_exclusive_boundary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            r#"{"images": [{"path": "a.png", "height": 10, "width": 20, "points": [[0, 0], [20, 5]]}]}"#,
        );
        match load_annotations(&p) {
            Err(Error::OutOfBoundsPoint { image, index, .. }) => {
                assert_eq!(image, "a.png");
                assert_eq!(index, 1);
            }
            other => panic!("expected OutOfBoundsPoint, got {other:?}"),
        }
    }

    #[test]
    fn schema_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            (r#"{"pictures": []}"#, "images"),
            (r#"{"images": [{"path": "a", "width": 2, "points": []}]}"#, "images[0].height"),
            (r#"{"images": [{"path": "a", "height": 2, "width": 2, "points": [[1]]}]}"#, "images[0].points[0]"),
            (r#"{"images": [{"path": "a", "height": 2, "width": 2, "points": [], "extra": 1}]}"#, "images[0].extra"),
        ];
        for (text, field) in cases {
            let p = write(dir.path(), text);
            match load_annotations(&p) {
                Err(Error::Schema { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected schema error for {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn missing_file() {
        assert!(matches!(load_annotations(Path::new("/nonexistent/ann.json")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn empty_annotation_gives_zero_map() {
        let d = points_to_density(&PointAnnotation::default(), 12, 9, 4.0).unwrap();
        assert_eq!(density_count(&d), 0.0);
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interior_and_corner_heads_have_unit_mass() {
        for p in [Point::new(20.3, 17.8), Point::new(0.0, 0.0)] {
            let d = points_to_density(&PointAnnotation::new(vec![p]), 40, 40, 4.0).unwrap();
            assert!((density_count(&d) - 1.0).abs() < 1e-6);
        }
    }

    /// Brute force: evaluate the kernel over the whole grid, keep only
    /// cells inside the 4-sigma square, renormalize.
    #[test]
    fn corner_head_matches_brute_force_truncated_kernel() {
        let sigma = 4.0;
        let (h, w) = (30, 30);
        let d = points_to_density(&PointAnnotation::new(vec![Point::new(0.0, 0.0)]), h, w, sigma).unwrap();
        let mut raw = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                if (x as f64) <= 4.0 * sigma && (y as f64) <= 4.0 * sigma {
                    raw[y * w + x] = (-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        let total: f64 = raw.iter().sum();
        for (a, b) in d.data().iter().zip(&raw) {
            assert!((a - b / total).abs() < 1e-12);
        }
        assert!((d.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn hand_summed_raster() {
        let r = Raster::from_rows(&[vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        assert_eq!(density_count(&r), 2.0);
    }

    #[test]
    fn seven_points_count_seven() {
        let pts = (0..7).map(|i| Point::new(3.0 + 5.0 * i as f64, (i * 4) as f64 + 0.5)).collect();
        let d = points_to_density(&PointAnnotation::new(pts), 32, 40, 4.0).unwrap();
        assert!((density_count(&d) - 7.0).abs() < 1e-5);
    }

    #[test]
    fn invalid_sigma_and_out_of_bounds() {
        let ann = PointAnnotation::new(vec![Point::new(1.0, 1.0)]);
        assert!(matches!(points_to_density(&ann, 4, 4, 0.0), Err(Error::InvalidSigma(_))));
        assert!(matches!(points_to_density(&ann, 4, 4, f64::NAN), Err(Error::InvalidSigma(_))));
        let bad = PointAnnotation::new(vec![Point::new(4.0, 1.0)]);
        assert!(matches!(points_to_density(&bad, 4, 4, 1.0), Err(Error::OutOfBoundsPoint { .. })));
    }

    #[test]
    fn annotations_json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![DatasetRecord {
            image_path: dir.path().join("images/a.png"),
            height: 5,
            width: 6,
            annotation: PointAnnotation::new(vec![Point::new(1.5, 2.25)]),
            split: Split::Test,
        }];
        let path = dir.path().join("annotations.json");
        write_annotations(&path, &recs).unwrap();
        assert_eq!(load_annotations(&path).unwrap(), recs);
    }
}
