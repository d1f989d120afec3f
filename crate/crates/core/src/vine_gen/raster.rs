use std::io::{self, Read, Write};

use nalgebra::Point2;
use serde::{Deserialize, Serialize};

use super::camera::NEAR_PLANE;
use super::{CameraModel, VineError, VineSkeleton};
use crate::geometry::Vec3;

/// Row-major monochrome image with intensities in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    /// Camera the image was rendered with, if any.
    pub camera: Option<CameraModel>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize) -> Result<Self, VineError> {
        if width == 0 || height == 0 {
            return Err(VineError::InvalidRaster(format!("dimensions must be positive, got {width}x{height}")));
        }
        Ok(Self { width, height, pixels: vec![0.0; width * height], camera: None })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self, VineError> {
        let mut img = Self::new(width, height)?;
        for y in 0..height {
            for x in 0..width {
                img.pixels[y * width + x] = f(x, y).clamp(0.0, 1.0);
            }
        }
        Ok(img)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.pixels[y * self.width + x] = value.clamp(0.0, 1.0);
    }

    /// Sub-image `[x0, x0 + w) x [y0, y0 + h)`, clipped to the image bounds.
    pub fn crop(&self, x0: i64, y0: i64, w: usize, h: usize) -> Result<Self, VineError> {
        let xa = x0.max(0) as usize;
        let ya = y0.max(0) as usize;
        let xb = ((x0 + w as i64).max(0) as usize).min(self.width);
        let yb = ((y0 + h as i64).max(0) as usize).min(self.height);
        if xb <= xa || yb <= ya {
            return Err(VineError::InvalidRaster("crop lies outside the image".into()));
        }
        Self::from_fn(xb - xa, yb - ya, |x, y| self.get(xa + x, ya + y))
    }

    pub fn nonzero_pixels(&self) -> Vec<(usize, usize)> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|&(x, y)| self.get(x, y) > 0.0)
            .collect()
    }

    /// Binary (P5) portable graymap.
    pub fn write_pgm<W: Write>(&self, mut out: W) -> io::Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
        out.write_all(&bytes)
    }

    /// Plain-text (P2) portable graymap.
    pub fn write_pgm_ascii<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "P2\n{} {}\n255", self.width, self.height)?;
        for row in self.pixels.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|&v| ((v * 255.0).round() as u8).to_string()).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    /// Reads a P2 or P5 graymap.
    pub fn read_pgm<R: Read>(mut input: R) -> Result<Self, VineError> {
        let mut data = Vec::new();
        input.read_to_end(&mut data).map_err(|e| VineError::Malformed(e.to_string()))?;
        let mut pos = 0usize;
        let mut token = || -> Result<String, VineError> {
            loop {
                while pos < data.len() && data[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < data.len() && data[pos] == b'#' {
                    while pos < data.len() && data[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < data.len() && !data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(VineError::Malformed("unexpected end of graymap".into()));
            }
            Ok(String::from_utf8_lossy(&data[start..pos]).into_owned())
        };
        let parse = |s: String| s.parse::<usize>().map_err(|e| VineError::Malformed(e.to_string()));
        let magic = token()?;
        let width = parse(token()?)?;
        let height = parse(token()?)?;
        let maxval = parse(token()?)?;
        if maxval == 0 || maxval > 255 {
            return Err(VineError::Malformed(format!("unsupported maxval {maxval}")));
        }
        let mut img = RasterImage::new(width, height)?;
        match magic.as_str() {
            "P2" => {
                for i in 0..width * height {
                    img.pixels[i] = parse(token()?)? as f64 / maxval as f64;
                }
            }
            "P5" => {
                let start = pos + 1;
                let raw = data
                    .get(start..start + width * height)
                    .ok_or_else(|| VineError::Malformed("truncated graymap".into()))?;
                for (p, &b) in img.pixels.iter_mut().zip(raw) {
                    *p = b as f64 / maxval as f64;
                }
            }
            other => return Err(VineError::Malformed(format!("unsupported magic {other}"))),
        }
        Ok(img)
    }
}

fn distance_to_segment_2d(p: Point2<f64>, a: Point2<f64>, b: Point2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 <= f64::EPSILON { 0.0 } else { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) };
    (p - (a + ab * s)).norm()
}

/// Clips a camera-frame segment to the half-space in front of the camera.
fn clip_to_front(a: Vec3, b: Vec3) -> Option<(Vec3, Vec3)> {
    match (a.z > NEAR_PLANE, b.z > NEAR_PLANE) {
        (true, true) => Some((a, b)),
        (false, false) => None,
        (front_a, _) => {
            let s = (NEAR_PLANE * 1.0001 - a.z) / (b.z - a.z);
            let cut = a + (b - a) * s;
            if front_a { Some((a, cut)) } else { Some((cut, b)) }
        }
    }
}

/// Renders each segment as a filled stroke whose half-width is the projected
/// segment radius (at least half a pixel). Pixel `(x, y)` covers the image
/// point with coordinates `(x, y)`.
pub fn project_to_raster(
    skeleton: &VineSkeleton,
    camera: &CameraModel,
    width: usize,
    height: usize,
) -> Result<RasterImage, VineError> {
    camera.validate()?;
    let mut img = RasterImage::new(width, height)?;
    img.camera = Some(camera.clone());
    let mut any_visible = false;
    for seg in &skeleton.segments {
        let Some((a, b)) = clip_to_front(camera.to_camera(&seg.start), camera.to_camera(&seg.end)) else {
            continue;
        };
        any_visible = true;
        let (pa, pb) = match (camera.project_camera(&a), camera.project_camera(&b)) {
            (Some(pa), Some(pb)) => (pa, pb),
            _ => continue,
        };
        let depth = 0.5 * (a.z + b.z);
        let half = (camera.focal_length() * seg.radius / depth).max(0.5);
        let x0 = (pa.x.min(pb.x) - half).floor().max(0.0);
        let x1 = (pa.x.max(pb.x) + half).ceil().min(width as f64 - 1.0);
        let y0 = (pa.y.min(pb.y) - half).floor().max(0.0);
        let y1 = (pa.y.max(pb.y) + half).ceil().min(height as f64 - 1.0);
        if x1 < x0 || y1 < y0 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                if distance_to_segment_2d(Point2::new(x as f64, y as f64), pa, pb) <= half {
                    img.set(x, y, 1.0);
                }
            }
        }
    }
    if !skeleton.segments.is_empty() && !any_visible {
        return Err(VineError::BehindCamera);
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mat3;
    use crate::vine_gen::{generate_vine, Segment, SegmentKind, VineSpec};
    use nalgebra::Matrix3;

    fn point_skeleton(p: Vec3) -> VineSkeleton {
        VineSkeleton {
            segments: vec![Segment { id: 0, parent: None, start: p, end: p, radius: 0.0, kind: SegmentKind::Trunk }],
            ..VineSkeleton::default()
        }
    }

    #[test]
    fn empty_skeleton_renders_black() {
        let img = project_to_raster(&VineSkeleton::default(), &CameraModel::default(), 64, 48).unwrap();
        assert!(img.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn optical_axis_point_hits_principal_point() {
        let k = Matrix3::new(100.0, 0.0, 20.0, 0.0, 100.0, 15.0, 0.0, 0.0, 1.0);
        let cam = CameraModel::new(k, Mat3::identity(), Vec3::zeros()).unwrap();
        let img = project_to_raster(&point_skeleton(Vec3::new(0.0, 0.0, 1.0)), &cam, 40, 30).unwrap();
        assert_eq!(img.nonzero_pixels(), vec![(20, 15)]);
    }

    #[test]
    fn everything_behind_camera_is_an_error() {
        let cam = CameraModel::default();
        let vine = point_skeleton(Vec3::new(-5.0, 0.0, 0.4));
        assert_eq!(project_to_raster(&vine, &cam, 64, 48), Err(VineError::BehindCamera));
    }

    #[test]
    fn principal_point_shift_translates_pixels() {
        let vine = generate_vine(&VineSpec::default()).unwrap();
        let cam = CameraModel::default();
        let a = project_to_raster(&vine, &cam, 640, 480).unwrap();
        let b = project_to_raster(&vine, &cam.shifted(7.0, -4.0), 640, 480).unwrap();
        let pa = a.nonzero_pixels();
        let pb = b.nonzero_pixels();
        assert!(!pa.is_empty());
        let shifted: std::collections::HashSet<(i64, i64)> =
            pb.iter().map(|&(x, y)| (x as i64, y as i64)).collect();
        let matched = pa
            .iter()
            .filter(|&&(x, y)| {
                let (sx, sy) = (x as i64 + 7, y as i64 - 4);
                (-1..=1).any(|dx| (-1..=1).any(|dy| shifted.contains(&(sx + dx, sy + dy))))
            })
            .count();
        // pixels pushed off the border are the only ones allowed to go missing
        assert!(matched as f64 >= 0.99 * pa.len() as f64);
    }

    #[test]
    fn pgm_round_trip() {
        let vine = generate_vine(&VineSpec::default()).unwrap();
        let img = project_to_raster(&vine, &CameraModel::default(), 80, 60).unwrap();
        for binary in [true, false] {
            let mut buf = Vec::new();
            if binary { img.write_pgm(&mut buf).unwrap() } else { img.write_pgm_ascii(&mut buf).unwrap() }
            let back = RasterImage::read_pgm(buf.as_slice()).unwrap();
            assert_eq!(back.width, 80);
            assert_eq!(back.pixels, img.pixels);
        }
    }

    #[test]
    fn crop_clips_to_bounds() {
        let img = RasterImage::from_fn(10, 10, |x, y| if x > y { 1.0 } else { 0.0 }).unwrap();
        let c = img.crop(-3, 5, 8, 10).unwrap();
        assert_eq!((c.width, c.height), (5, 5));
        assert_eq!(c.get(4, 0), 0.0);
        assert!(img.crop(20, 20, 3, 3).is_err());
    }
}
