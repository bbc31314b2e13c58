//! Observation synthesis: pinhole camera on the body, a procedural textured
//! ground plane standing in for a learned view synthesizer, image
//! randomizations and the state-indexed observation database.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion, Vector2, Vector3};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{State, N_OTHER, NX};
use crate::setops::BoxSet;

/// Grayscale image, row-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch { expected: width * height, got: data.len(), context: "image buffer" });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter("image intensities must lie in [0, 1]".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, data: vec![value.clamp(0.0, 1.0); width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.data.len() as f64
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len() as f64
    }

    /// Peak signal-to-noise ratio in dB for peak 1; infinite for identical
    /// images.
    pub fn psnr(&self, reference: &Image) -> f64 {
        let mse = self.data.iter().zip(&reference.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / self.data.len() as f64;
        if mse == 0.0 {
            f64::INFINITY
        } else {
            -10.0 * mse.log10()
        }
    }

    fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Binary PGM (P5, maxval 255) with optional comment lines.
    pub fn write_pgm<W: Write>(&self, mut w: W, comments: &[String]) -> Result<()> {
        write!(w, "P5\n")?;
        for c in comments {
            writeln!(w, "# {c}")?;
        }
        write!(w, "{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_pgm<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut fields = Vec::new();
        let mut line = String::new();
        while fields.len() < 4 {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated PGM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_owned));
        }
        if fields[0] != "P5" {
            return Err(Error::Format(format!("expected P5 magic, got {}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field {s}")));
        let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("unsupported maxval {maxval}")));
        }
        let mut buf = vec![0u8; w * h];
        r.read_exact(&mut buf)?;
        Ok(Self { width: w, height: h, data: buf.into_iter().map(|b| b as f64 / 255.0).collect() })
    }
}

/// Image plus the low-dimensional measurement `[p_z, v_x, v_y, v_z, roll, pitch]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub image: Image,
    pub other: [f64; N_OTHER],
}

/// The measured subset of the state seen by the policy.
pub fn other_from_state(x: &State) -> [f64; N_OTHER] {
    [x[2], x[3], x[4], x[5], x[6], x[7]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub vertical_fov_deg: f64,
    pub tilt_deg: f64,
    /// Camera centre in the body frame (m).
    pub offset: [f64; 3],
    /// Sub-pixel rays per axis.
    pub supersample: usize,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self { width: 32, height: 32, vertical_fov_deg: 60.0, tilt_deg: 45.0, offset: [0.05, 0.0, 0.0], supersample: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera frame in the body frame.
    pub t_bc: Isometry3<f64>,
    pub supersample: usize,
}

impl CameraRig {
    pub fn from_config(cfg: &CameraConfig) -> Result<Self> {
        if cfg.width == 0 || cfg.height == 0 || cfg.supersample == 0 {
            return Err(Error::InvalidParameter("camera needs positive size and supersampling".into()));
        }
        if !(cfg.vertical_fov_deg > 0.0 && cfg.vertical_fov_deg < 180.0) {
            return Err(Error::InvalidParameter("vertical field of view must be in (0, 180) degrees".into()));
        }
        let fy = 0.5 * cfg.height as f64 / (0.5 * cfg.vertical_fov_deg.to_radians()).tan();
        let (s, c) = cfg.tilt_deg.to_radians().sin_cos();
        // columns: image right, image down, optical axis (forward and down)
        let r = Matrix3::from_columns(&[Vector3::new(0.0, -1.0, 0.0), Vector3::new(-s, 0.0, -c), Vector3::new(c, 0.0, -s)]);
        let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        let t_bc = Isometry3::from_parts(Translation3::new(cfg.offset[0], cfg.offset[1], cfg.offset[2]), rot);
        Self::new(cfg.width, cfg.height, fy, fy, cfg.width as f64 / 2.0, cfg.height as f64 / 2.0, t_bc, cfg.supersample)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(width: usize, height: usize, fx: f64, fy: f64, cx: f64, cy: f64, t_bc: Isometry3<f64>, supersample: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidParameter("focal lengths must be positive".into()));
        }
        let r = t_bc.rotation.to_rotation_matrix().into_inner();
        if (r.transpose() * r - Matrix3::identity()).amax() > 1e-9 {
            return Err(Error::InvalidParameter("camera rotation is not orthonormal".into()));
        }
        Ok(Self { width, height, fx, fy, cx, cy, t_bc, supersample: supersample.max(1) })
    }
}

/// Ground intensity field. Two slow ramps (monotone over the flight area)
/// make position globally identifiable; mid-frequency waves and value-noise
/// speckle give local detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Texture {
    pub seed: u64,
    pub ramp_amplitude: f64,
    pub ramp_wavelength: [f64; 2],
    pub wave_amplitude: f64,
    pub wave_lengths: [f64; 3],
    pub speckle_amplitude: f64,
    pub speckle_cell: f64,
}

impl Default for Texture {
    fn default() -> Self {
        Self {
            seed: 7,
            ramp_amplitude: 0.25,
            ramp_wavelength: [60.0, 42.0],
            wave_amplitude: 0.08,
            wave_lengths: [6.9, 9.3, 8.1],
            speckle_amplitude: 0.07,
            speckle_cell: 0.5,
        }
    }
}

fn hash01(seed: u64, i: i64, j: i64) -> f64 {
    let mut z = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

impl Texture {
    pub fn intensity(&self, x: f64, y: f64) -> f64 {
        use std::f64::consts::TAU;
        let ramp = self.ramp_amplitude
            * ((TAU * x / self.ramp_wavelength[0]).sin() + (TAU * y / self.ramp_wavelength[1]).sin());
        let [l1, l2, l3] = self.wave_lengths;
        let waves = self.wave_amplitude
            * ((TAU * x / l1).sin() * (TAU * y / l2).cos() + (TAU * (x + y) / l3 / std::f64::consts::SQRT_2).sin());
        let (gx, gy) = (x / self.speckle_cell, y / self.speckle_cell);
        let (ix, iy) = (gx.floor(), gy.floor());
        let (fx, fy) = (gx - ix, gy - iy);
        let (sx, sy) = (fx * fx * (3.0 - 2.0 * fx), fy * fy * (3.0 - 2.0 * fy));
        let (ix, iy) = (ix as i64, iy as i64);
        let v00 = hash01(self.seed, ix, iy);
        let v10 = hash01(self.seed, ix + 1, iy);
        let v01 = hash01(self.seed, ix, iy + 1);
        let v11 = hash01(self.seed, ix + 1, iy + 1);
        let noise = (v00 * (1.0 - sx) + v10 * sx) * (1.0 - sy) + (v01 * (1.0 - sx) + v11 * sx) * sy;
        (0.5 + ramp + waves + self.speckle_amplitude * (2.0 * noise - 1.0)).clamp(0.0, 1.0)
    }
}

pub const MIN_CAMERA_HEIGHT: f64 = 0.05;
pub const SKY_INTENSITY: f64 = 0.5;

/// Ground point hit by the ray through pixel coordinates `(u, v)`, or `None`
/// if the ray does not descend.
pub fn ray_ground_hit(t_ic: &Isometry3<f64>, rig: &CameraRig, u: f64, v: f64) -> Option<Vector2<f64>> {
    let d_c = Vector3::new((u - rig.cx) / rig.fx, (v - rig.cy) / rig.fy, 1.0);
    let d = t_ic.rotation * d_c;
    let o = t_ic.translation.vector;
    if d.z >= -1e-12 {
        return None;
    }
    let s = -o.z / d.z;
    Some(Vector2::new(o.x + s * d.x, o.y + s * d.y))
}

/// Ray-cast every pixel onto the ground plane `z = 0`. `t_ic` maps camera
/// coordinates to world coordinates.
pub fn render(t_ic: &Isometry3<f64>, rig: &CameraRig, texture: &Texture) -> Result<Image> {
    let h = t_ic.translation.vector.z;
    if !(h > MIN_CAMERA_HEIGHT) {
        return Err(Error::DegeneratePose(format!("camera height {h:.3} m is at or below the ground")));
    }
    let ss = rig.supersample;
    let step = 1.0 / ss as f64;
    let mut data = Vec::with_capacity(rig.width * rig.height);
    for py in 0..rig.height {
        for px in 0..rig.width {
            let mut acc = 0.0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let u = px as f64 + (sx as f64 + 0.5) * step;
                    let v = py as f64 + (sy as f64 + 0.5) * step;
                    acc += match ray_ground_hit(t_ic, rig, u, v) {
                        Some(p) => texture.intensity(p.x, p.y),
                        None => SKY_INTENSITY,
                    };
                }
            }
            data.push(acc / (ss * ss) as f64);
        }
    }
    Ok(Image { width: rig.width, height: rig.height, data })
}

/// Body attitude with yaw fixed at zero: `R = R_y(pitch) R_x(roll)`.
pub fn body_rotation(roll: f64, pitch: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::y_axis(), pitch) * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), roll)
}

/// Body pose in the world; the state position is relative to `anchor`.
pub fn body_pose(x: &State, anchor: &Vector3<f64>) -> Isometry3<f64> {
    let p = anchor + Vector3::new(x[0], x[1], x[2]);
    Isometry3::from_parts(Translation3::from(p), body_rotation(x[6], x[7]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtrinsicPerturbation {
    pub max_angle_deg: f64,
    pub max_translation: f64,
}

impl Default for ExtrinsicPerturbation {
    fn default() -> Self {
        Self { max_angle_deg: 2.0, max_translation: 0.02 }
    }
}

impl ExtrinsicPerturbation {
    /// Roll/pitch/yaw angles each uniform in `±max_angle`, translation each
    /// uniform in `±max_translation`, applied in the camera frame.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Isometry3<f64> {
        let a = self.max_angle_deg.to_radians();
        let mut ang = [0.0; 3];
        let mut tr = [0.0; 3];
        for v in &mut ang {
            *v = if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        }
        for v in &mut tr {
            *v = if self.max_translation > 0.0 { rng.random_range(-self.max_translation..=self.max_translation) } else { 0.0 };
        }
        Isometry3::from_parts(
            Translation3::new(tr[0], tr[1], tr[2]),
            UnitQuaternion::from_euler_angles(ang[0], ang[1], ang[2]),
        )
    }
}

/// `T_IC = T_IB(x) T_BC`, with `T_BC` composed with a random perturbation
/// when one is given.
pub fn pose_from_state<R: Rng + ?Sized>(
    x: &State,
    anchor: &Vector3<f64>,
    rig: &CameraRig,
    perturb: Option<&ExtrinsicPerturbation>,
    rng: &mut R,
) -> Isometry3<f64> {
    let t_bc = match perturb {
        Some(p) => rig.t_bc * p.sample(rng),
        None => rig.t_bc,
    };
    body_pose(x, anchor) * t_bc
}

/// Probability and magnitude range of one randomization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomOp {
    pub prob: f64,
    pub lo: f64,
    pub hi: f64,
}

impl RandomOp {
    pub const OFF: RandomOp = RandomOp { prob: 0.0, lo: 0.0, hi: 0.0 };

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<f64> {
        // the draw is consumed even when off so streams stay aligned
        let fire = rng.random::<f64>() < self.prob;
        let m = if self.hi > self.lo { rng.random_range(self.lo..=self.hi) } else { self.lo };
        fire.then_some(m)
    }
}

/// Brightness scale, gamma, additive noise sigma, blur sigma (pixels) and
/// erase side as a fraction of the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomizeConfig {
    pub brightness: RandomOp,
    pub gamma: RandomOp,
    pub noise: RandomOp,
    pub blur: RandomOp,
    pub erase: RandomOp,
}

impl Default for RandomizeConfig {
    fn default() -> Self {
        Self::off()
    }
}

impl RandomizeConfig {
    pub fn off() -> Self {
        Self { brightness: RandomOp::OFF, gamma: RandomOp::OFF, noise: RandomOp::OFF, blur: RandomOp::OFF, erase: RandomOp::OFF }
    }

    pub fn moderate() -> Self {
        Self {
            brightness: RandomOp { prob: 0.5, lo: 0.8, hi: 1.2 },
            gamma: RandomOp { prob: 0.5, lo: 0.8, hi: 1.25 },
            noise: RandomOp { prob: 0.3, lo: 0.0, hi: 0.03 },
            blur: RandomOp { prob: 0.3, lo: 0.3, hi: 1.0 },
            erase: RandomOp { prob: 0.2, lo: 0.1, hi: 0.3 },
        }
    }
}

pub fn randomize_image<R: Rng + ?Sized>(img: &Image, cfg: &RandomizeConfig, rng: &mut R) -> Image {
    let mut out = img.clone();
    if let Some(b) = cfg.brightness.draw(rng) {
        out.data.iter_mut().for_each(|v| *v *= b);
        out = out.clamped();
    }
    if let Some(g) = cfg.gamma.draw(rng) {
        out.data.iter_mut().for_each(|v| *v = v.powf(g));
    }
    if let Some(s) = cfg.noise.draw(rng) {
        out = add_gaussian_noise(&out, s, rng);
    }
    if let Some(s) = cfg.blur.draw(rng) {
        out = gaussian_blur(&out, s);
    }
    let erase = cfg.erase.draw(rng);
    let (u0, u1) = (rng.random::<f64>(), rng.random::<f64>());
    if let Some(f) = erase {
        let ew = ((f * out.width as f64).round() as usize).clamp(1, out.width);
        let eh = ((f * out.height as f64).round() as usize).clamp(1, out.height);
        let x0 = ((out.width - ew) as f64 * u0).round() as usize;
        let y0 = ((out.height - eh) as f64 * u1).round() as usize;
        erase_rect(&mut out, x0, y0, ew, eh);
    }
    out.clamped()
}

pub fn erase_rect(img: &mut Image, x0: usize, y0: usize, w: usize, h: usize) {
    for y in y0..(y0 + h).min(img.height) {
        for x in x0..(x0 + w).min(img.width) {
            img.data[y * img.width + x] = 0.5;
        }
    }
}

pub fn add_gaussian_noise<R: Rng + ?Sized>(img: &Image, sigma: f64, rng: &mut R) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let n = Normal::new(0.0, sigma).expect("positive sigma");
    Image { width: img.width, height: img.height, data: img.data.iter().map(|v| v + n.sample(rng)).collect() }.clamped()
}

/// Separable Gaussian blur with clamped borders and radius `ceil(3 sigma)`.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return img.clone();
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / ks).collect();
    let (w, h) = (img.width as i64, img.height as i64);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (t, kv) in k.iter().enumerate() {
                    let o = t as i64 - r;
                    let (sx, sy) = if horizontal { ((x + o).clamp(0, w - 1), y) } else { (x, (y + o).clamp(0, h - 1)) };
                    acc += kv * src[(sy * w + sx) as usize];
                }
                dst[(y * w + x) as usize] = acc;
            }
        }
        dst
    };
    let tmp = pass(&img.data, true);
    Image { width: img.width, height: img.height, data: pass(&tmp, false) }.clamped()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StressKind {
    GaussianNoise,
    GaussianBlur,
}

/// One evaluation-time corruption and its PSNR against the clean image.
pub fn apply_visual_stress<R: Rng + ?Sized>(img: &Image, kind: StressKind, magnitude: f64, rng: &mut R) -> Result<(Image, f64)> {
    if !(magnitude >= 0.0) {
        return Err(Error::InvalidParameter("stress magnitude must be non-negative".into()));
    }
    let out = match kind {
        StressKind::GaussianNoise => add_gaussian_noise(img, magnitude, rng),
        StressKind::GaussianBlur => gaussian_blur(img, magnitude),
    };
    let psnr = out.psnr(img);
    Ok((out, psnr))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    pub x_hat: State,
    pub observation: Observation,
}

/// Observations from collected demonstrations, indexed by estimated state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObservationDatabase {
    entries: Vec<DbEntry>,
}

impl ObservationDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }

    pub fn push(&mut self, x_hat: State, observation: Observation) {
        self.entries.push(DbEntry { x_hat, observation });
    }

    pub fn extend(&mut self, other: ObservationDatabase) {
        self.entries.extend(other.entries);
    }

    /// Entries with `x_hat` in `center + z`, at most `max_count`, drawn
    /// uniformly without replacement (returned in index order).
    pub fn query_tube<R: Rng + ?Sized>(&self, center: &State, z: &BoxSet, max_count: usize, rng: &mut R) -> Vec<&DbEntry> {
        let tube = match z.translate(center.as_slice()) {
            Ok(t) => t,
            Err(_) => return Vec::new(),
        };
        let hits: Vec<usize> = (0..self.entries.len())
            .filter(|&i| tube.contains(self.entries[i].x_hat.as_slice()))
            .collect();
        if hits.len() <= max_count {
            return hits.into_iter().map(|i| &self.entries[i]).collect();
        }
        let mut pick: Vec<usize> = index::sample(rng, hits.len(), max_count).into_iter().map(|k| hits[k]).collect();
        pick.sort_unstable();
        pick.into_iter().map(|i| &self.entries[i]).collect()
    }

    /// Directory of `obs_NNNNNN.pgm` files plus `index.csv`.
    pub fn save(&self, dir: &Path, comments: &[String]) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut index = fs::File::create(dir.join("index.csv"))?;
        for c in comments {
            writeln!(index, "# {c}")?;
        }
        let mut wtr = csv::Writer::from_writer(index);
        let mut header = vec!["file".to_string()];
        header.extend((0..NX).map(|i| format!("x_hat{i}")));
        header.extend((0..N_OTHER).map(|i| format!("other{i}")));
        wtr.write_record(&header)?;
        for (k, e) in self.entries.iter().enumerate() {
            let name = format!("obs_{k:06}.pgm");
            e.observation.image.write_pgm(fs::File::create(dir.join(&name))?, comments)?;
            let mut row = vec![name];
            row.extend(e.x_hat.iter().map(|v| format!("{v:e}")));
            row.extend(e.observation.other.iter().map(|v| format!("{v:e}")));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("index.csv"))?;
        let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let mut db = Self::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 1 + NX + N_OTHER {
                return Err(Error::Format(format!("index row has {} fields", rec.len())));
            }
            let nums: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|s| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number {s}"))))
                .collect::<Result<_>>()?;
            let image = Image::read_pgm(fs::File::open(dir.join(&rec[0]))?)?;
            let mut other = [0.0; N_OTHER];
            other.copy_from_slice(&nums[NX..]);
            db.push(State::from_column_slice(&nums[..NX]), Observation { image, other });
        }
        Ok(db)
    }
}
