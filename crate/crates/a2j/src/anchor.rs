//! Anchor-grid construction, depth-image crop/resize with recorded
//! transforms, and the coordinate conversions between world, source-image
//! and crop spaces. Everything here is a pure function.

use serde::{Deserialize, Serialize};

use crate::error::{A2jError, Result};

/// Feature-map downsampling factor of the backbone.
pub const DOWNSAMPLE: usize = 16;

/// H×W depth map in millimeters. A value of exactly 0 marks an invalid
/// pixel (sensor hole / out-of-crop); `is_valid` is the mask view.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height);
        DepthImage { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        DepthImage { width, height, data: vec![value; width * height] }
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.at(x, y) != 0.0
    }
}

/// In-plain anchor positions on the cropped image, plus the mapping from
/// each feature-map cell to the anchors its output channels carry.
#[derive(Clone, Debug)]
pub struct AnchorGrid {
    pub stride: usize,
    pub cols: usize,
    pub rows: usize,
    /// Row-major anchor positions (u, v) in cropped-image pixels.
    pub positions: Vec<[f32; 2]>,
    pub cells_w: usize,
    pub cells_h: usize,
    /// Per feature cell (row-major), the anchor indices it owns, row-major
    /// over the in-cell sub-grid.
    pub cell_map: Vec<Vec<usize>>,
}

impl AnchorGrid {
    pub fn num_anchors(&self) -> usize {
        self.positions.len()
    }

    pub fn anchors_per_cell(&self) -> usize {
        let q = DOWNSAMPLE / self.stride;
        q * q
    }

    /// Mean anchor position.
    pub fn centroid(&self) -> [f32; 2] {
        let mut u = 0.0f64;
        let mut v = 0.0f64;
        for p in &self.positions {
            u += p[0] as f64;
            v += p[1] as f64;
        }
        let n = self.positions.len() as f64;
        [(u / n) as f32, (v / n) as f32]
    }
}

/// Builds the anchor grid for a crop of `width`×`height` pixels. Anchor
/// (r, c) sits at (c·stride + stride/2, r·stride + stride/2).
pub fn build_anchor_grid(width: usize, height: usize, stride: usize) -> Result<AnchorGrid> {
    if stride == 0 || width % stride != 0 || height % stride != 0 {
        return Err(A2jError::Config(format!(
            "image {width}x{height} not divisible by anchor stride {stride}"
        )));
    }
    if width % DOWNSAMPLE != 0 || height % DOWNSAMPLE != 0 || DOWNSAMPLE % stride != 0 {
        return Err(A2jError::Config(format!(
            "image {width}x{height} with stride {stride} incompatible with {DOWNSAMPLE}x downsampling"
        )));
    }
    let cols = width / stride;
    let rows = height / stride;
    let half = stride as f32 / 2.0;
    let mut positions = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            positions.push([c as f32 * stride as f32 + half, r as f32 * stride as f32 + half]);
        }
    }
    let q = DOWNSAMPLE / stride;
    let cells_w = width / DOWNSAMPLE;
    let cells_h = height / DOWNSAMPLE;
    let mut cell_map = Vec::with_capacity(cells_w * cells_h);
    for cr in 0..cells_h {
        for cc in 0..cells_w {
            let mut cell = Vec::with_capacity(q * q);
            for sr in 0..q {
                for sc in 0..q {
                    cell.push((cr * q + sr) * cols + cc * q + sc);
                }
            }
            cell_map.push(cell);
        }
    }
    Ok(AnchorGrid { stride, cols, rows, positions, cells_w, cells_h, cell_map })
}

/// Pinhole camera, pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
}

impl CameraIntrinsics {
    pub fn project(&self, p: [f32; 3]) -> (f32, f32) {
        (p[0] * self.fx / p[2] + self.cx, p[1] * self.fy / p[2] + self.cy)
    }
}

/// Invertible mapping from source-image pixels to crop pixels, plus the
/// depth transform parameters μ (gain) and θ (offset, mm). `post` is an
/// extra affine in crop space (identity unless augmentation composed a
/// rotation/scale into the sample).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropTransform {
    pub src_x0: f32,
    pub src_y0: f32,
    pub src_w: f32,
    pub src_h: f32,
    pub scale_x: f32,
    pub scale_y: f32,
    pub out_w: usize,
    pub out_h: usize,
    pub mu: f32,
    pub theta: f32,
    /// Row-major 2×3 affine [a, b, tx, c, d, ty] applied after the crop.
    pub post: [f32; 6],
}

pub const IDENTITY_POST: [f32; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

impl CropTransform {
    /// Source pixel → crop pixel.
    pub fn apply(&self, u: f32, v: f32) -> (f32, f32) {
        let uc = (u - self.src_x0) * self.scale_x;
        let vc = (v - self.src_y0) * self.scale_y;
        let [a, b, tx, c, d, ty] = self.post;
        (a * uc + b * vc + tx, c * uc + d * vc + ty)
    }

    /// Crop pixel → source pixel.
    pub fn invert(&self, u: f32, v: f32) -> Result<(f32, f32)> {
        let [a, b, tx, c, d, ty] = self.post;
        let det = a * d - b * c;
        if det.abs() < 1e-12 || self.scale_x == 0.0 || self.scale_y == 0.0 {
            return Err(A2jError::Geometry("non-invertible crop transform".into()));
        }
        let (u, v) = (u - tx, v - ty);
        let uc = (d * u - b * v) / det;
        let vc = (-c * u + a * v) / det;
        Ok((uc / self.scale_x + self.src_x0, vc / self.scale_y + self.src_y0))
    }

    /// Composes another affine (crop space) after this transform.
    pub fn compose_post(&mut self, m: [f32; 6]) {
        let [a, b, tx, c, d, ty] = self.post;
        let [ma, mb, mtx, mc, md, mty] = m;
        self.post = [
            ma * a + mb * c,
            ma * b + mb * d,
            ma * tx + mb * ty + mtx,
            mc * a + md * c,
            mc * b + md * d,
            mc * tx + md * ty + mty,
        ];
    }
}

/// Crop region: a hand-style center point with a square extent, or a
/// body-style bounding box, in source pixels.
#[derive(Clone, Copy, Debug)]
pub enum CropSpec {
    Center { u: f32, v: f32, extent: f32 },
    Bbox { x0: f32, y0: f32, w: f32, h: f32 },
}

/// Crops `region` out of `image` and bilinearly resizes it to `target`,
/// excluding invalid (zero-depth) source pixels from interpolation. The
/// returned transform maps source pixels to crop pixels.
pub fn crop_and_resize(
    image: &DepthImage,
    region: CropSpec,
    target: (usize, usize),
    mu: f32,
    theta: f32,
) -> Result<(DepthImage, CropTransform)> {
    let (x0, y0, w, h) = match region {
        CropSpec::Center { u, v, extent } => (u - extent / 2.0, v - extent / 2.0, extent, extent),
        CropSpec::Bbox { x0, y0, w, h } => (x0, y0, w, h),
    };
    if !(w > 0.0 && h > 0.0) {
        return Err(A2jError::Geometry(format!("degenerate crop region {w}x{h}")));
    }
    if x0 + w <= 0.0 || y0 + h <= 0.0 || x0 >= image.width as f32 || y0 >= image.height as f32 {
        return Err(A2jError::Geometry("crop region does not overlap the image".into()));
    }
    let (tw, th) = target;
    let transform = CropTransform {
        src_x0: x0,
        src_y0: y0,
        src_w: w,
        src_h: h,
        scale_x: tw as f32 / w,
        scale_y: th as f32 / h,
        out_w: tw,
        out_h: th,
        mu,
        theta,
        post: IDENTITY_POST,
    };
    let mut out = vec![0.0f32; tw * th];
    for oy in 0..th {
        for ox in 0..tw {
            let (su, sv) = transform.invert(ox as f32, oy as f32).expect("scale > 0");
            out[oy * tw + ox] = sample_bilinear_valid(image, su, sv);
        }
    }
    Ok((DepthImage::new(tw, th, out), transform))
}

/// Bilinear sample that treats zero pixels as holes: invalid neighbors are
/// dropped and the remaining weights renormalized; returns 0 when every
/// neighbor is invalid or out of bounds.
pub fn sample_bilinear_valid(image: &DepthImage, u: f32, v: f32) -> f32 {
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let mut acc = 0.0f64;
    let mut wsum = 0.0f64;
    for (dx, dy, wgt) in [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ] {
        if wgt == 0.0 {
            continue;
        }
        let x = x0 as isize + dx;
        let y = y0 as isize + dy;
        if x < 0 || y < 0 || x >= image.width as isize || y >= image.height as isize {
            continue;
        }
        let val = image.at(x as usize, y as usize);
        if val == 0.0 {
            continue;
        }
        acc += wgt as f64 * val as f64;
        wsum += wgt as f64;
    }
    if wsum == 0.0 {
        0.0
    } else {
        (acc / wsum) as f32
    }
}

/// Depth target transform of the crop: T^d = μ(Z − θ).
pub fn depth_target_transform(z_mm: f32, mu: f32, theta: f32) -> f32 {
    mu * (z_mm - theta)
}

/// Inverse of [`depth_target_transform`].
pub fn depth_target_inverse(t: f32, mu: f32, theta: f32) -> Result<f32> {
    if mu == 0.0 {
        return Err(A2jError::Config("depth transform gain mu must be nonzero".into()));
    }
    Ok(t / mu + theta)
}

/// Maps a crop-space pixel and metric depth back to world millimeters via
/// the inverse crop and the pinhole model.
pub fn unwarp_to_world(
    uv: (f32, f32),
    depth_mm: f32,
    t: &CropTransform,
    cam: &CameraIntrinsics,
) -> Result<[f32; 3]> {
    let (u_src, v_src) = t.invert(uv.0, uv.1)?;
    Ok([
        (u_src - cam.cx) * depth_mm / cam.fx,
        (v_src - cam.cy) * depth_mm / cam.fy,
        depth_mm,
    ])
}
