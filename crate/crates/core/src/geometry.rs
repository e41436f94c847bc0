//! Equirectangular projection math: embedding a perspective snapshot into a
//! panorama canvas, extracting snapshots back out, roll augmentation, and the
//! fixed evaluation-view grid.
//!
//! Conventions. The canvas maps column c to longitude ((c+0.5)/W)*360-180
//! and row r to latitude 90-((r+0.5)/H)*180, so row 0 is the zenith and the
//! left/right edges meet at longitude +-180. World coordinates are y-up with
//! yaw 0 looking along +z. A camera at pitch +-90 keeps a defined frame by
//! taking its right vector from yaw+90 at the horizon (yaw acts as roll
//! there). All sampling is bilinear, wrapping horizontally and clamping
//! vertically; positions are computed in f64 regardless of the pixel type.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Viewing direction and field of view of a snapshot camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    yaw_deg: f64,
    pitch_deg: f64,
    fov_h_deg: f64,
    fov_v_deg: f64,
}

impl CameraPose {
    pub fn new(yaw_deg: f64, pitch_deg: f64, fov_h_deg: f64, fov_v_deg: f64) -> Result<Self> {
        if !(0.0..180.0).contains(&fov_h_deg)
            || !(0.0..180.0).contains(&fov_v_deg)
            || fov_h_deg == 0.0
            || fov_v_deg == 0.0
        {
            return Err(Error::Config(format!(
                "field of view must lie strictly inside (0, 180) degrees, got {fov_h_deg} x {fov_v_deg}"
            )));
        }
        if !(-90.0..=90.0).contains(&pitch_deg) {
            return Err(Error::Config(format!(
                "pitch must lie in [-90, 90] degrees, got {pitch_deg}"
            )));
        }
        let mut yaw = yaw_deg.rem_euclid(360.0);
        if yaw >= 180.0 {
            yaw -= 360.0;
        }
        Ok(CameraPose {
            yaw_deg: yaw,
            pitch_deg,
            fov_h_deg,
            fov_v_deg,
        })
    }

    pub fn yaw_deg(&self) -> f64 {
        self.yaw_deg
    }
    pub fn pitch_deg(&self) -> f64 {
        self.pitch_deg
    }
    pub fn fov_h_deg(&self) -> f64 {
        self.fov_h_deg
    }
    pub fn fov_v_deg(&self) -> f64 {
        self.fov_v_deg
    }
}

/// A [3, H, W] panorama with W = 2H and values in [-1, 1].
#[derive(Debug, Clone)]
pub struct EquirectCanvas<T: Scalar> {
    pixels: Tensor<T>,
}

impl<T: Scalar> EquirectCanvas<T> {
    pub fn new(pixels: Tensor<T>) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 || s[2] != 2 * s[1] {
            return Err(Error::Config(format!(
                "equirectangular canvas must be [3, H, 2H], got {s:?}"
            )));
        }
        Ok(EquirectCanvas { pixels })
    }

    pub fn zeros(height: usize) -> Self {
        EquirectCanvas {
            pixels: Tensor::zeros(&[3, height, 2 * height]),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }
    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }
    pub fn into_pixels(self) -> Tensor<T> {
        self.pixels
    }
}

/// Binary mask [1, H, W] marking where a snapshot was embedded.
#[derive(Debug, Clone)]
pub struct Mask<T: Scalar> {
    values: Tensor<T>,
}

impl<T: Scalar> Mask<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[0] != 1 {
            return Err(Error::Config(format!("mask must be [1, H, W], got {s:?}")));
        }
        if values
            .data()
            .iter()
            .any(|&v| v != T::zero() && v != T::one())
        {
            return Err(Error::Config("mask entries must be 0 or 1".into()));
        }
        Ok(Mask { values })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == T::one()).count()
    }
}

#[derive(Debug, Clone, Copy)]
struct Vec3 {
    x: f64,
    y: f64,
    z: f64,
}

impl Vec3 {
    fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }
    fn cross(self, o: Vec3) -> Vec3 {
        Vec3 {
            x: self.y * o.z - self.z * o.y,
            y: self.z * o.x - self.x * o.z,
            z: self.x * o.y - self.y * o.x,
        }
    }
    fn add3(self, o: Vec3) -> Vec3 {
        Vec3 {
            x: self.x + o.x,
            y: self.y + o.y,
            z: self.z + o.z,
        }
    }
    fn scale3(self, s: f64) -> Vec3 {
        Vec3 {
            x: self.x * s,
            y: self.y * s,
            z: self.z * s,
        }
    }
}

fn dir(yaw_deg: f64, pitch_deg: f64) -> Vec3 {
    let yaw = yaw_deg.to_radians();
    let pitch = pitch_deg.to_radians();
    Vec3 {
        x: pitch.cos() * yaw.sin(),
        y: pitch.sin(),
        z: pitch.cos() * yaw.cos(),
    }
}

/// Orthonormal camera frame (forward, right, up).
fn camera_frame(pose: &CameraPose) -> (Vec3, Vec3, Vec3) {
    let f = dir(pose.yaw_deg, pose.pitch_deg);
    let right = if pose.pitch_deg.abs() >= 90.0 - 1e-9 {
        // at the poles yaw acts as roll
        dir(pose.yaw_deg + 90.0, 0.0)
    } else {
        let up0 = Vec3 { x: 0.0, y: 1.0, z: 0.0 };
        let r = up0.cross(f);
        let n = r.dot(r).sqrt();
        r.scale3(1.0 / n)
    };
    let up = f.cross(right);
    (f, right, up)
}

/// Bilinear read of one channel plane with horizontal wrap, vertical clamp.
fn sample_plane<T: Scalar>(plane: &[T], h: usize, w: usize, row: f64, col: f64) -> f64 {
    let r0f = row.floor();
    let c0f = col.floor();
    let fr = row - r0f;
    let fc = col - c0f;
    let r0 = (r0f as i64).clamp(0, h as i64 - 1) as usize;
    let r1 = (r0f as i64 + 1).clamp(0, h as i64 - 1) as usize;
    let c0 = (c0f as i64).rem_euclid(w as i64) as usize;
    let c1 = (c0f as i64 + 1).rem_euclid(w as i64) as usize;
    let v00 = plane[r0 * w + c0].to_f64();
    let v01 = plane[r0 * w + c1].to_f64();
    let v10 = plane[r1 * w + c0].to_f64();
    let v11 = plane[r1 * w + c1].to_f64();
    let top = v00 * (1.0 - fc) + v01 * fc;
    let bot = v10 * (1.0 - fc) + v11 * fc;
    top * (1.0 - fr) + bot * fr
}

/// Bilinear read with edge clamping on both axes (snapshot images).
fn sample_plane_clamped<T: Scalar>(plane: &[T], h: usize, w: usize, row: f64, col: f64) -> f64 {
    let r0f = row.floor();
    let c0f = col.floor();
    let fr = row - r0f;
    let fc = col - c0f;
    let cl = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let (r0, r1) = (cl(r0f as i64, h), cl(r0f as i64 + 1, h));
    let (c0, c1) = (cl(c0f as i64, w), cl(c0f as i64 + 1, w));
    let v00 = plane[r0 * w + c0].to_f64();
    let v01 = plane[r0 * w + c1].to_f64();
    let v10 = plane[r1 * w + c0].to_f64();
    let v11 = plane[r1 * w + c1].to_f64();
    let top = v00 * (1.0 - fc) + v01 * fc;
    let bot = v10 * (1.0 - fc) + v11 * fc;
    top * (1.0 - fr) + bot * fr
}

/// Map a snapshot into a fresh H x 2H canvas by inverse gnomonic projection.
/// Pixels outside the projected region are exactly zero; the mask is 1
/// exactly where a canvas pixel center back-projects inside the camera
/// frustum.
pub fn embed_snapshot<T: Scalar>(
    img: &Tensor<T>,
    pose: &CameraPose,
    height: usize,
) -> Result<(EquirectCanvas<T>, Mask<T>)> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Config(format!(
            "snapshot must be [3, h, w], got {s:?}"
        )));
    }
    let (ih, iw) = (s[1], s[2]);
    let (h, w) = (height, 2 * height);
    let (f, right, up) = camera_frame(pose);
    let lim_h = (pose.fov_h_deg.to_radians() / 2.0).tan();
    let lim_v = (pose.fov_v_deg.to_radians() / 2.0).tan();

    let mut pixels = vec![T::zero(); 3 * h * w];
    let mut mask = vec![T::zero(); h * w];
    let img_planes: Vec<&[T]> = (0..3)
        .map(|c| &img.data()[c * ih * iw..(c + 1) * ih * iw])
        .collect();

    for r in 0..h {
        let lat = 90.0 - ((r as f64 + 0.5) / h as f64) * 180.0;
        for c in 0..w {
            let lon = ((c as f64 + 0.5) / w as f64) * 360.0 - 180.0;
            let d = dir(lon, lat);
            let depth = d.dot(f);
            if depth <= 0.0 {
                continue;
            }
            let tx = d.dot(right) / depth;
            let ty = d.dot(up) / depth;
            if tx.abs() > lim_h || ty.abs() > lim_v {
                continue;
            }
            let u = (tx / lim_h + 1.0) / 2.0 * iw as f64 - 0.5;
            let v = (1.0 - ty / lim_v) / 2.0 * ih as f64 - 0.5;
            for ch in 0..3 {
                pixels[(ch * h + r) * w + c] =
                    T::from_f64(sample_plane_clamped(img_planes[ch], ih, iw, v, u));
            }
            mask[r * w + c] = T::one();
        }
    }
    let canvas = EquirectCanvas::new(Tensor::from_vec(pixels, &[3, h, w])?)?;
    let mask = Mask::new(Tensor::from_vec(mask, &[1, h, w])?)?;
    Ok((canvas, mask))
}

/// Gnomonic extraction of an h x w snapshot looking along `pose`.
pub fn extract_snapshot<T: Scalar>(
    canvas: &EquirectCanvas<T>,
    pose: &CameraPose,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    if pose.pitch_deg.abs() >= 90.0 - 1e-9 && pose.fov_v_deg >= 180.0 - 1e-6 {
        return Err(Error::Config(
            "cannot extract a >= 180 degree vertical field of view at the poles".into(),
        ));
    }
    let (ch_h, ch_w) = (canvas.height(), canvas.width());
    let (f, right, up) = camera_frame(pose);
    let lim_h = (pose.fov_h_deg.to_radians() / 2.0).tan();
    let lim_v = (pose.fov_v_deg.to_radians() / 2.0).tan();
    let data = canvas.pixels().data();
    let planes: Vec<&[T]> = (0..3)
        .map(|c| &data[c * ch_h * ch_w..(c + 1) * ch_h * ch_w])
        .collect();

    let mut out = vec![T::zero(); 3 * h * w];
    for vy in 0..h {
        let ty = (1.0 - 2.0 * (vy as f64 + 0.5) / h as f64) * lim_v;
        for vx in 0..w {
            let tx = (2.0 * (vx as f64 + 0.5) / w as f64 - 1.0) * lim_h;
            let ray = f.add3(right.scale3(tx)).add3(up.scale3(ty));
            let lon = ray.x.atan2(ray.z).to_degrees();
            let lat = ray
                .y
                .atan2((ray.x * ray.x + ray.z * ray.z).sqrt())
                .to_degrees();
            let row = (90.0 - lat) / 180.0 * ch_h as f64 - 0.5;
            let col = (lon + 180.0) / 360.0 * ch_w as f64 - 0.5;
            for c in 0..3 {
                out[(c * h + vy) * w + vx] =
                    T::from_f64(sample_plane(planes[c], ch_h, ch_w, row, col));
            }
        }
    }
    Tensor::from_vec(out, &[3, h, w])
}

/// Horizontal circular shift; a pure (differentiable) permutation.
pub fn roll_canvas<T: Scalar>(canvas: &EquirectCanvas<T>, shift_px: i64) -> EquirectCanvas<T> {
    EquirectCanvas {
        pixels: canvas
            .pixels()
            .roll_last(shift_px)
            .expect("canvas is non-empty"),
    }
}

pub const EVAL_ELEVATIONS_DEG: [f64; 5] = [90.0, 45.0, 0.0, -45.0, -90.0];
pub const EVAL_YAWS_PER_ELEVATION: usize = 10;

/// Camera poses of the 50 evaluation views, elevation-major.
pub fn eval_view_poses(fov_deg: f64) -> Vec<CameraPose> {
    let mut poses = Vec::with_capacity(EVAL_ELEVATIONS_DEG.len() * EVAL_YAWS_PER_ELEVATION);
    for &elev in &EVAL_ELEVATIONS_DEG {
        for k in 0..EVAL_YAWS_PER_ELEVATION {
            let yaw = k as f64 * 360.0 / EVAL_YAWS_PER_ELEVATION as f64;
            poses.push(CameraPose::new(yaw, elev, fov_deg, fov_deg).expect("valid pose"));
        }
    }
    poses
}

/// Extract the 5 elevations x 10 yaws evaluation grid (50 views).
pub fn eval_views<T: Scalar>(
    canvas: &EquirectCanvas<T>,
    h: usize,
    w: usize,
    fov_deg: f64,
) -> Result<Vec<Tensor<T>>> {
    eval_view_poses(fov_deg)
        .iter()
        .map(|pose| extract_snapshot(canvas, pose, h, w))
        .collect()
}

/// Peak signal-to-noise ratio in dB over [-1, 1] data (peak 2.0).
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    20.0 * (2.0 / mse.sqrt()).log10()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::randn_t;

    fn smooth_snapshot(h: usize, w: usize) -> Tensor<f64> {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let fy = y as f64 / h as f64;
                    let fx = x as f64 / w as f64;
                    let v = 0.5 * (2.0 * std::f64::consts::PI * (fx + 0.3 * c as f64)).sin()
                        + 0.4 * (2.0 * std::f64::consts::PI * (fy - 0.2 * c as f64)).cos();
                    data.push(v);
                }
            }
        }
        Tensor::from_vec(data, &[3, h, w]).unwrap()
    }

    #[test]
    fn central_ray_hits_snapshot_center() {
        let img = smooth_snapshot(33, 33);
        let pose = CameraPose::new(0.0, 0.0, 90.0, 90.0).unwrap();
        let (canvas, _) = embed_snapshot(&img, &pose, 64).unwrap();
        let (h, w) = (64usize, 128usize);
        let (r, c) = (h / 2, w / 2);
        for ch in 0..3 {
            let canvas_v = canvas.pixels().data()[(ch * h + r) * w + c];
            let center_v = img.data()[(ch * 33 + 16) * 33 + 16];
            assert!(
                (canvas_v - center_v).abs() < 0.1,
                "channel {ch}: {canvas_v} vs {center_v}"
            );
        }
    }

    #[test]
    fn mask_complement_is_exact_zero() {
        let img = smooth_snapshot(16, 16);
        let pose = CameraPose::new(0.0, 0.0, 90.0, 90.0).unwrap();
        let (canvas, mask) = embed_snapshot(&img, &pose, 32).unwrap();
        assert!(mask.count() > 0);
        let (h, w) = (32usize, 64usize);
        for r in 0..h {
            for c in 0..w {
                if mask.values().data()[r * w + c] == 0.0 {
                    for ch in 0..3 {
                        assert_eq!(canvas.pixels().data()[(ch * h + r) * w + c], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn embedding_is_mask_idempotent() {
        let img = smooth_snapshot(16, 16);
        let pose = CameraPose::new(10.0, -5.0, 80.0, 70.0).unwrap();
        let (_, m1) = embed_snapshot(&img, &pose, 32).unwrap();
        let (_, m2) = embed_snapshot(&img, &pose, 32).unwrap();
        assert_eq!(m1.values().to_vec(), m2.values().to_vec());
    }

    #[test]
    fn constant_canvas_extracts_constant() {
        let canvas = EquirectCanvas::new(Tensor::full(&[3, 16, 32], 0.25f64)).unwrap();
        let pose = CameraPose::new(33.0, 12.0, 90.0, 90.0).unwrap();
        let v = extract_snapshot(&canvas, &pose, 8, 8).unwrap();
        assert!(v.data().iter().all(|&x| (x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn yaw_roll_symmetry() {
        // extraction at yaw 0 from a canvas rolled by W/2 equals extraction
        // at yaw 180 from the unrolled canvas
        let pix = randn_t(500, &[3, 24, 48]);
        let canvas = EquirectCanvas::new(pix).unwrap();
        let rolled = roll_canvas(&canvas, 24);
        let a =
            extract_snapshot(&rolled, &CameraPose::new(0.0, 0.0, 90.0, 90.0).unwrap(), 12, 12)
                .unwrap();
        let b = extract_snapshot(
            &canvas,
            &CameraPose::new(180.0, 0.0, 90.0, 90.0).unwrap(),
            12,
            12,
        )
        .unwrap();
        let max_diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn eval_views_count_and_cyclic_symmetry() {
        let pix = randn_t(501, &[3, 24, 48]);
        let canvas = EquirectCanvas::new(pix).unwrap();
        let views = eval_views(&canvas, 8, 8, 90.0).unwrap();
        assert_eq!(views.len(), 50);
        // pitch-0 views of the W/2-rolled canvas are a 5-position cyclic
        // permutation (180 degrees = 5 x 36)
        let rolled = roll_canvas(&canvas, 24);
        let views_r = eval_views(&rolled, 8, 8, 90.0).unwrap();
        for k in 0..10 {
            let a = &views_r[20 + k]; // elevation-0 block starts at index 20
            let b = &views[20 + (k + 5) % 10];
            let max_diff = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff < 1e-9, "view {k}: max diff {max_diff}");
        }
    }

    #[test]
    fn round_trip_psnr_beats_30db() {
        let img = smooth_snapshot(64, 64);
        let pose = CameraPose::new(0.0, 0.0, 90.0, 90.0).unwrap();
        let (canvas, _) = embed_snapshot(&img, &pose, 64).unwrap();
        let back = extract_snapshot(&canvas, &pose, 64, 64).unwrap();
        let q = psnr(&img, &back);
        assert!(q > 30.0, "round-trip PSNR {q:.2} dB");
    }

    #[test]
    fn fov_at_least_180_is_rejected() {
        assert!(CameraPose::new(0.0, 0.0, 180.0, 90.0).is_err());
        assert!(CameraPose::new(0.0, 0.0, 90.0, 181.0).is_err());
        assert!(CameraPose::new(0.0, 95.0, 90.0, 90.0).is_err());
    }

    #[test]
    fn roll_preserves_pixel_multiset() {
        let pix = randn_t(502, &[3, 8, 16]);
        let canvas = EquirectCanvas::new(pix.clone()).unwrap();
        let rolled = roll_canvas(&canvas, 5);
        let mut a = pix.to_vec();
        let mut b = rolled.pixels().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn pole_views_are_defined() {
        let pix = randn_t(503, &[3, 16, 32]);
        let canvas = EquirectCanvas::new(pix).unwrap();
        for pitch in [90.0, -90.0] {
            let pose = CameraPose::new(45.0, pitch, 90.0, 90.0).unwrap();
            let v = extract_snapshot(&canvas, &pose, 8, 8).unwrap();
            assert!(v.all_finite());
        }
    }
}
