//! On-disk formats.
//!
//! # Scene / checkpoint file
//!
//! Plain text, one record per line, whitespace-separated fields, floats in
//! shortest round-trip decimal form (`inf` and `NaN` allowed). Lines starting
//! with `#` and blank lines are ignored.
//!
//! ```text
//! splat4d-scene 1
//! iteration <n>
//! filter <kind> <sigma_s> <rho_min> <rho_max> <rho_thre> <epsilon> <render_rate_ratio> <per_axis|isotropic>
//! tracker <momentum> <switch_iteration>
//! primitives <count>
//! <id> <px> <py> <pz> <rw> <rx> <ry> <rz> <sx> <sy> <sz> <opacity> <r> <g> <b> <interval|none>
//! keyframes <count>
//! <primitive index> <time> <dpx> <dpy> <dpz> <drw> <drx> <dry> <drz> <dsx> <dsy> <dsz>
//! optimizer <group count>
//! group <name> <lr> <step> <len>
//! m <len values>
//! v <len values>
//! end
//! ```
//!
//! Keyframe lines are grouped by primitive in time order. A plain scene file
//! has `optimizer 0`.
//!
//! # Dataset directory
//!
//! `manifest.txt` plus one binary image per view:
//!
//! ```text
//! splat4d-dataset 1
//! name <name>
//! background <r> <g> <b>
//! supersample <s>
//! times <count> <t0> <t1> ...
//! camera <index> <focal> <cx> <cy> <width> <height> <r00> <r01> ... <r22> <tx> <ty> <tz>
//! view <camera> <time> <file>
//! end
//! ```
//!
//! Rotation entries are the world-to-camera matrix in row-major order. An
//! image file holds a little-endian header of three `u32` (width, height,
//! channel count = 4) followed by `f64` samples, row-major, channels
//! R, G, B, transmittance.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::deformation::{DeformationTrack, Keyframe};
use crate::filters::{AdaptiveMode, FilterConfig, FilterKind};
use crate::frequency::FrequencyTracker;
use crate::geometry::{CameraModel, GaussianPrimitive, Quat};
use crate::optimizer::{Adam, AdamGroup, ParamGroup};
use crate::rasterizer::RenderedImage;
use crate::scene::Scene;
use crate::scenes::{Dataset, View};
use crate::{Error, Result};

pub const SCENE_HEADER: &str = "splat4d-scene 1";
pub const DATASET_HEADER: &str = "splat4d-dataset 1";
pub const MANIFEST_NAME: &str = "manifest.txt";
const IMAGE_CHANNELS: u32 = 4;

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Everything needed to resume or render a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub scene: Scene,
    pub filter: FilterConfig,
    pub tracker: FrequencyTracker,
    pub optimizer: Option<Adam>,
}

fn adaptive_mode_name(m: AdaptiveMode) -> &'static str {
    match m {
        AdaptiveMode::PerAxis => "per_axis",
        AdaptiveMode::Isotropic => "isotropic",
    }
}

fn push_fields(out: &mut String, values: impl IntoIterator<Item = f64>) {
    for v in values {
        let _ = write!(out, " {v}");
    }
}

fn quat_fields(q: Quat) -> [f64; 4] {
    q.to_array()
}

pub fn format_checkpoint(c: &Checkpoint) -> String {
    let mut out = String::new();
    let f = &c.filter;
    let _ = writeln!(out, "{SCENE_HEADER}");
    let _ = writeln!(out, "iteration {}", c.iteration);
    let _ = writeln!(
        out,
        "filter {} {} {} {} {} {} {} {}",
        f.kind,
        f.sigma_s,
        f.rho_min,
        f.rho_max,
        f.rho_thre,
        f.epsilon,
        f.render_rate_ratio,
        adaptive_mode_name(f.adaptive_mode)
    );
    let _ = writeln!(
        out,
        "tracker {} {}",
        c.tracker.momentum, c.tracker.switch_iteration
    );
    let _ = writeln!(out, "primitives {}", c.scene.len());
    for g in &c.scene.primitives {
        out.push_str(&g.id.to_string());
        push_fields(&mut out, g.position.iter().copied());
        push_fields(&mut out, quat_fields(g.rotation));
        push_fields(&mut out, g.scale.iter().copied());
        push_fields(&mut out, [g.opacity]);
        push_fields(&mut out, g.color.iter().copied());
        match g.min_sampling_interval {
            Some(t) => push_fields(&mut out, [t]),
            None => out.push_str(" none"),
        }
        out.push('\n');
    }
    let total: usize = c.scene.tracks.iter().map(|t| t.len()).sum();
    let _ = writeln!(out, "keyframes {total}");
    for (k, track) in c.scene.tracks.iter().enumerate() {
        for kf in track.keyframes() {
            out.push_str(&k.to_string());
            push_fields(&mut out, [kf.time]);
            push_fields(&mut out, kf.delta_position.iter().copied());
            push_fields(&mut out, quat_fields(kf.delta_rotation));
            push_fields(&mut out, kf.delta_scale.iter().copied());
            out.push('\n');
        }
    }
    let groups = c.optimizer.as_ref().map_or(&[][..], |a| &a.groups[..]);
    let _ = writeln!(out, "optimizer {}", groups.len());
    for g in groups {
        let _ = writeln!(
            out,
            "group {} {} {} {}",
            g.group.name(),
            g.lr,
            g.step,
            g.m.len()
        );
        out.push('m');
        push_fields(&mut out, g.m.iter().copied());
        out.push_str("\nv");
        push_fields(&mut out, g.v.iter().copied());
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

/// Line cursor over a text file, skipping comments and blank lines.
struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            inner: text.lines().enumerate(),
            last: 0,
        }
    }

    fn next(&mut self) -> Result<(usize, Vec<&'a str>)> {
        for (i, line) in self.inner.by_ref() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.last = i + 1;
            return Ok((i + 1, line.split_whitespace().collect()));
        }
        Err(Error::parse(self.last + 1, "unexpected end of file"))
    }

    /// Next line, which must start with `key` and have `n` further fields
    /// (any number when `n` is `None`).
    fn record(&mut self, key: &str, n: Option<usize>) -> Result<(usize, Vec<&'a str>)> {
        let (line, fields) = self.next()?;
        if fields[0] != key {
            return Err(Error::parse(
                line,
                format!("expected '{key}', found '{}'", fields[0]),
            ));
        }
        if let Some(n) = n {
            if fields.len() != n + 1 {
                return Err(Error::parse(
                    line,
                    format!("'{key}' needs {n} fields, found {}", fields.len() - 1),
                ));
            }
        }
        Ok((line, fields[1..].to_vec()))
    }
}

fn num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::parse(line, format!("bad number '{s}'")))
}

fn nums(line: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields.iter().map(|s| num(line, s)).collect()
}

fn vec3(v: &[f64]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

fn quat(v: &[f64]) -> Quat {
    Quat::new(v[0], v[1], v[2], v[3])
}

fn parse_group(line: usize, name: &str) -> Result<ParamGroup> {
    ParamGroup::ALL
        .into_iter()
        .find(|g| g.name() == name)
        .ok_or_else(|| Error::parse(line, format!("unknown parameter group '{name}'")))
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let mut lines = Lines::new(text);
    let (line, header) = lines.next()?;
    if header.join(" ") != SCENE_HEADER {
        return Err(Error::parse(
            line,
            format!("expected header '{SCENE_HEADER}'"),
        ));
    }
    let (line, f) = lines.record("iteration", Some(1))?;
    let iteration = num(line, f[0])?;

    let (line, f) = lines.record("filter", Some(8))?;
    let kind = FilterKind::parse(f[0]).map_err(|e| Error::parse(line, e.to_string()))?;
    let v = nums(line, &f[1..7])?;
    let adaptive_mode = match f[7] {
        "per_axis" => AdaptiveMode::PerAxis,
        "isotropic" => AdaptiveMode::Isotropic,
        other => {
            return Err(Error::parse(
                line,
                format!("unknown adaptive mode '{other}'"),
            ))
        }
    };
    let filter = FilterConfig {
        kind,
        sigma_s: v[0],
        rho_min: v[1],
        rho_max: v[2],
        rho_thre: v[3],
        epsilon: v[4],
        render_rate_ratio: v[5],
        adaptive_mode,
    };
    filter
        .validate()
        .map_err(|e| Error::parse(line, e.to_string()))?;

    let (line, f) = lines.record("tracker", Some(2))?;
    let tracker = FrequencyTracker::new(num(line, f[0])?, num(line, f[1])?)
        .map_err(|e| Error::parse(line, e.to_string()))?;

    let (line, f) = lines.record("primitives", Some(1))?;
    let count: usize = num(line, f[0])?;
    let mut primitives = Vec::with_capacity(count);
    for _ in 0..count {
        let (line, f) = lines.next()?;
        if f.len() != 16 {
            return Err(Error::parse(
                line,
                format!("primitive needs 16 fields, found {}", f.len()),
            ));
        }
        let id = num(line, f[0])?;
        let v = nums(line, &f[1..15])?;
        let interval = match f[15] {
            "none" => None,
            s => Some(num(line, s)?),
        };
        let mut g =
            GaussianPrimitive::new(id, vec3(&v[0..3]), vec3(&v[7..10]), v[10], vec3(&v[11..14]))
                .with_rotation(quat(&v[3..7]));
        g.min_sampling_interval = interval;
        primitives.push(g);
    }

    let (line, f) = lines.record("keyframes", Some(1))?;
    let total: usize = num(line, f[0])?;
    let mut per_primitive: Vec<Vec<Keyframe>> = vec![Vec::new(); count];
    for _ in 0..total {
        let (line, f) = lines.next()?;
        if f.len() != 12 {
            return Err(Error::parse(
                line,
                format!("keyframe needs 12 fields, found {}", f.len()),
            ));
        }
        let k: usize = num(line, f[0])?;
        if k >= count {
            return Err(Error::parse(
                line,
                format!("keyframe refers to primitive {k} of {count}"),
            ));
        }
        let v = nums(line, &f[1..])?;
        per_primitive[k].push(Keyframe {
            time: v[0],
            delta_position: vec3(&v[1..4]),
            delta_rotation: quat(&v[4..8]),
            delta_scale: vec3(&v[8..11]),
        });
    }
    let tracks = per_primitive
        .into_iter()
        .map(|kfs| DeformationTrack::new(kfs).map_err(|e| Error::parse(line, e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let scene = Scene::new(primitives, tracks)?;

    let (line, f) = lines.record("optimizer", Some(1))?;
    let groups: usize = num(line, f[0])?;
    let mut adam = Vec::with_capacity(groups);
    for _ in 0..groups {
        let (line, f) = lines.record("group", Some(4))?;
        let group = parse_group(line, f[0])?;
        let lr = num(line, f[1])?;
        let step = num(line, f[2])?;
        let len: usize = num(line, f[3])?;
        let (line, m) = lines.record("m", Some(len))?;
        let m = nums(line, &m)?;
        let (line, v) = lines.record("v", Some(len))?;
        let v = nums(line, &v)?;
        adam.push(AdamGroup {
            group,
            lr,
            step,
            m,
            v,
        });
    }
    lines.record("end", Some(0))?;
    let optimizer = (groups > 0).then_some(Adam { groups: adam });
    Ok(Checkpoint {
        iteration,
        scene,
        filter,
        tracker,
        optimizer,
    })
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<()> {
    write_atomic(path, format_checkpoint(c).as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&read_text(path)?)
}

pub fn encode_image(img: &RenderedImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + img.width * img.height * 32);
    for v in [img.width as u32, img.height as u32, IMAGE_CHANNELS] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (rgb, t) in img.color.chunks_exact(3).zip(&img.transmittance) {
        for v in rgb.iter().chain(std::iter::once(t)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<RenderedImage> {
    let bad = |m: &str| Error::Image(m.to_string());
    if bytes.len() < 12 {
        return Err(bad("truncated image header"));
    }
    let word = |i: usize| {
        u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize
    };
    let (w, h, c) = (word(0), word(1), word(2));
    if c != IMAGE_CHANNELS as usize {
        return Err(bad("unsupported channel count"));
    }
    let body = &bytes[12..];
    if body.len() != w * h * c * 8 {
        return Err(bad("image size does not match header"));
    }
    let samples: Vec<f64> = body
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let mut img = RenderedImage::new(w, h);
    for (i, px) in samples.chunks_exact(4).enumerate() {
        img.color[3 * i..3 * i + 3].copy_from_slice(&px[..3]);
        img.transmittance[i] = px[3];
    }
    Ok(img)
}

/// 8-bit RGB PNG with values clamped to [0, 1].
pub fn write_png(path: &Path, img: &RenderedImage) -> Result<()> {
    let data: Vec<u8> = img
        .color
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, data)
        .ok_or_else(|| Error::Image("pixel buffer does not match dimensions".into()))?;
    let mut bytes = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    write_atomic(path, &bytes.into_inner())
}

pub fn view_file_name(i: usize) -> String {
    format!("view_{i:04}.bin")
}

pub fn format_manifest(d: &Dataset, files: &[String]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{DATASET_HEADER}");
    let _ = writeln!(out, "name {}", d.name);
    let _ = writeln!(
        out,
        "background {} {} {}",
        d.background.x, d.background.y, d.background.z
    );
    let _ = writeln!(out, "supersample {}", d.supersample);
    out.push_str(&format!("times {}", d.times.len()));
    push_fields(&mut out, d.times.iter().copied());
    out.push('\n');
    for c in &d.cameras {
        let _ = write!(
            out,
            "camera {} {} {} {} {} {}",
            c.index, c.focal, c.principal_point.x, c.principal_point.y, c.width, c.height
        );
        push_fields(&mut out, (0..9).map(|i| c.rotation[(i / 3, i % 3)]));
        push_fields(&mut out, c.translation.iter().copied());
        out.push('\n');
    }
    for (v, file) in d.views.iter().zip(files) {
        let _ = writeln!(out, "view {} {} {}", v.camera, v.time, file);
    }
    out.push_str("end\n");
    out
}

/// Writes the manifest and one image per view into `dir`.
pub fn save_dataset(dir: &Path, d: &Dataset) -> Result<()> {
    if d.name.split_whitespace().count() != 1 {
        return Err(Error::InvalidParameter(format!(
            "dataset name '{}' must be a single word",
            d.name
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files: Vec<String> = (0..d.views.len()).map(view_file_name).collect();
    for (v, file) in d.views.iter().zip(&files) {
        write_atomic(&dir.join(file), &encode_image(&v.image))?;
    }
    write_atomic(
        &dir.join(MANIFEST_NAME),
        format_manifest(d, &files).as_bytes(),
    )
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = read_text(&dir.join(MANIFEST_NAME))?;
    let mut lines = Lines::new(&text);
    let (line, header) = lines.next()?;
    if header.join(" ") != DATASET_HEADER {
        return Err(Error::parse(
            line,
            format!("expected header '{DATASET_HEADER}'"),
        ));
    }
    let (_, f) = lines.record("name", Some(1))?;
    let name = f[0].to_string();
    let (line, f) = lines.record("background", Some(3))?;
    let background = vec3(&nums(line, &f)?);
    let (line, f) = lines.record("supersample", Some(1))?;
    let supersample = num(line, f[0])?;
    let (line, f) = lines.record("times", None)?;
    let n: usize = num(line, f.first().copied().unwrap_or(""))?;
    if f.len() != n + 1 {
        return Err(Error::parse(
            line,
            format!("expected {n} times, found {}", f.len() - 1),
        ));
    }
    let times = nums(line, &f[1..])?;
    let mut cameras = Vec::new();
    let mut views = Vec::new();
    loop {
        let (line, f) = lines.next()?;
        match f[0] {
            "camera" if f.len() == 19 => {
                let index = num(line, f[1])?;
                let v = nums(line, &f[2..5])?;
                let (w, h) = (num(line, f[5])?, num(line, f[6])?);
                let rotation = Matrix3::from_row_slice(&nums(line, &f[7..16])?);
                let t = vec3(&nums(line, &f[16..19])?);
                let cam =
                    CameraModel::new(v[0], Vector2::new(v[1], v[2]), w, h, rotation, t, index)
                        .map_err(|e| Error::parse(line, e.to_string()))?;
                cameras.push(cam);
            }
            "view" if f.len() == 4 => {
                let camera: usize = num(line, f[1])?;
                if camera >= cameras.len() {
                    return Err(Error::parse(
                        line,
                        format!("view refers to camera {camera} of {}", cameras.len()),
                    ));
                }
                let time = num(line, f[2])?;
                let path = dir.join(f[3]);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let image = decode_image(&bytes)?;
                let cam = &cameras[camera];
                if (image.width, image.height) != (cam.width, cam.height) {
                    return Err(Error::parse(line, "image size does not match its camera"));
                }
                views.push(View {
                    camera,
                    time,
                    image,
                });
            }
            "end" if f.len() == 1 => break,
            other => return Err(Error::parse(line, format!("unexpected record '{other}'"))),
        }
    }
    Ok(Dataset {
        name,
        cameras,
        times,
        views,
        background,
        supersample,
    })
}
