use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::oracle::oracle_render;
use super::{Capture, SceneSpec};
use crate::error::{Error, Result};
use crate::numerics::rng::seeded;
use crate::parallel::Parallelism;
use crate::renderer::{Camera, Image};
use crate::Real;

pub const SCENE_FILE: &str = "scene.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateOptions {
    pub views: usize,
    pub times: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn metadata_file(self) -> String {
        format!("transforms_{}.json", self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFrame {
    pub file_path: String,
    pub time: Real,
    pub camera: Camera,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub root: PathBuf,
    pub fov_x: Real,
    pub width: usize,
    pub height: usize,
    pub frames: Vec<DatasetFrame>,
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Distinct frame times in increasing order.
    pub fn times(&self) -> Vec<Real> {
        let mut t: Vec<Real> = self.frames.iter().map(|f| f.time).collect();
        t.sort_by(|a, b| a.total_cmp(b));
        t.dedup();
        t
    }

    /// Indices of the frames captured at `time`.
    pub fn frames_at(&self, time: Real) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| self.frames[i].time == time).collect()
    }
}

fn place(capture: &Capture, azimuth: Real, elevation: Real, width: usize, height: usize) -> Result<Camera> {
    let r = capture.radius;
    let eye = [
        r * elevation.cos() * azimuth.cos(),
        r * elevation.sin(),
        r * elevation.cos() * azimuth.sin(),
    ];
    Camera::look_at(width, height, capture.fov_x, eye, [0.0; 3], [0.0, 1.0, 0.0])
}

/// Training cameras: evenly spread azimuths with seeded jitter and
/// elevations stepped through the configured range.
pub fn orbit_cameras(capture: &Capture, views: usize, width: usize, height: usize, seed: u64) -> Result<Vec<Camera>> {
    let mut rng = seeded(seed);
    let tau = 2.0 * std::f64::consts::PI as Real;
    let [lo, hi] = capture.elevation;
    (0..views)
        .map(|i| {
            let jitter = capture.jitter * (rng.random::<f64>() as Real - 0.5);
            let azimuth = tau * (i as Real + jitter) / views as Real;
            let step = (0.5 + i as Real * 0.618_033_988_75).fract();
            place(capture, azimuth, lo + (hi - lo) * step, width, height)
        })
        .collect()
}

/// Held-out cameras halfway between training azimuths at mid elevation.
pub fn test_cameras(capture: &Capture, views: usize, width: usize, height: usize) -> Result<Vec<Camera>> {
    let tau = 2.0 * std::f64::consts::PI as Real;
    let mid = 0.5 * (capture.elevation[0] + capture.elevation[1]);
    let n = capture.test_views;
    (0..n)
        .map(|k| {
            let slot = (k * views / n.max(1)) as Real + 0.5;
            place(capture, tau * slot / views as Real, mid, width, height)
        })
        .collect()
}

fn time_of(j: usize, times: usize) -> Real {
    if times == 1 {
        0.0
    } else {
        j as Real / (times - 1) as Real
    }
}

fn write_split(dir: &Path, split: Split, fov: Real, frames: &[DatasetFrame]) -> Result<()> {
    let entries: Vec<Value> = frames
        .iter()
        .map(|f| {
            json!({
                "file_path": f.file_path,
                "time": f.time,
                "transform_matrix": f.camera.c2w,
            })
        })
        .collect();
    let meta = json!({ "camera_angle_x": fov, "frames": entries });
    let path = dir.join(split.metadata_file());
    std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
}

fn render_split(
    spec: &SceneSpec,
    dir: &Path,
    split: Split,
    cams: &[Camera],
    times: usize,
    parallelism: Parallelism,
) -> Result<Vec<DatasetFrame>> {
    let mut frames = Vec::with_capacity(cams.len() * times);
    for j in 0..times {
        let t = time_of(j, times);
        for cam in cams {
            let idx = frames.len();
            let file_path = format!("./{}/r_{idx}", split.name());
            let image = oracle_render(spec, cam, t, parallelism)?;
            image.save_png(&dir.join(format!("{}/r_{idx}.png", split.name())))?;
            frames.push(DatasetFrame {
                file_path,
                time: t,
                camera: cam.clone(),
                image,
            });
        }
    }
    write_split(dir, split, spec.capture.fov_x, &frames)?;
    Ok(frames)
}

/// Renders every training view at every time (plus the held-out views) and
/// writes them with their metadata under `out_dir`.
pub fn generate_dataset(spec: &SceneSpec, opts: &GenerateOptions, out_dir: &Path, parallelism: Parallelism) -> Result<SceneDataset> {
    spec.validate()?;
    if opts.views == 0 || opts.times == 0 || opts.width == 0 || opts.height == 0 {
        return Err(Error::invalid("views, times and image size must all be positive"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cams = orbit_cameras(&spec.capture, opts.views, opts.width, opts.height, opts.seed)?;
    let frames = render_split(spec, out_dir, Split::Train, &cams, opts.times, parallelism)?;
    if spec.capture.test_views > 0 {
        let test = test_cameras(&spec.capture, opts.views, opts.width, opts.height)?;
        render_split(spec, out_dir, Split::Test, &test, opts.times, parallelism)?;
    }
    let record = json!({ "spec": spec, "options": opts });
    let path = out_dir.join(SCENE_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&path, e))?;
    Ok(SceneDataset {
        root: out_dir.to_path_buf(),
        fov_x: spec.capture.fov_x,
        width: opts.width,
        height: opts.height,
        frames,
    })
}

/// The scene description and options a generated dataset was made from.
pub fn load_scene_record(dir: &Path) -> Result<(SceneSpec, GenerateOptions)> {
    let path = dir.join(SCENE_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    #[derive(Deserialize)]
    struct Record {
        spec: SceneSpec,
        options: GenerateOptions,
    }
    let r: Record = serde_json::from_str(&text)?;
    Ok((r.spec, r.options))
}

fn field<'a>(v: &'a Value, key: &str, ctx: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| Error::Metadata(format!("{ctx}: missing field `{key}`")))
}

fn number(v: &Value, ctx: &str) -> Result<Real> {
    v.as_f64()
        .map(|x| x as Real)
        .ok_or_else(|| Error::Metadata(format!("{ctx}: expected a number")))
}

fn matrix(v: &Value, ctx: &str) -> Result<[[Real; 4]; 4]> {
    let rows = v
        .as_array()
        .filter(|r| r.len() == 4)
        .ok_or_else(|| Error::Metadata(format!("{ctx}: expected a 4x4 array")))?;
    let mut m = [[0.0; 4]; 4];
    for (i, row) in rows.iter().enumerate() {
        let cols = row
            .as_array()
            .filter(|c| c.len() == 4)
            .ok_or_else(|| Error::Metadata(format!("{ctx}[{i}]: expected 4 numbers")))?;
        for (j, c) in cols.iter().enumerate() {
            m[i][j] = number(c, &format!("{ctx}[{i}][{j}]"))?;
        }
    }
    Ok(m)
}

fn image_path(root: &Path, file_path: &str) -> PathBuf {
    let rel = file_path.strip_prefix("./").unwrap_or(file_path);
    let p = root.join(rel);
    if p.extension().is_some() {
        p
    } else {
        p.with_extension("png")
    }
}

/// Loads `transforms_train.json` and its images.
pub fn load_dataset(dir: &Path, background: [Real; 3]) -> Result<SceneDataset> {
    load_split(dir, Split::Train, background)
}

/// Loads one split. Times outside `[0, 1]` are rescaled onto it.
pub fn load_split(dir: &Path, split: Split, background: [Real; 3]) -> Result<SceneDataset> {
    let path = dir.join(split.metadata_file());
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: Value = serde_json::from_str(&text).map_err(|e| Error::Metadata(format!("{}: {e}", path.display())))?;
    let fov_x = number(field(&meta, "camera_angle_x", "metadata")?, "camera_angle_x")?;
    let list = field(&meta, "frames", "metadata")?
        .as_array()
        .ok_or_else(|| Error::Metadata("frames: expected an array".into()))?;
    if list.is_empty() {
        return Err(Error::Metadata("frames: no frames listed".into()));
    }
    let mut frames = Vec::with_capacity(list.len());
    let mut size: Option<(usize, usize)> = None;
    for (i, f) in list.iter().enumerate() {
        let ctx = format!("frames[{i}]");
        let file_path = field(f, "file_path", &ctx)?
            .as_str()
            .ok_or_else(|| Error::Metadata(format!("{ctx}.file_path: expected a string")))?
            .to_string();
        let time = number(field(f, "time", &ctx)?, &format!("{ctx}.time"))?;
        let c2w = matrix(field(f, "transform_matrix", &ctx)?, &format!("{ctx}.transform_matrix"))?;
        let image = Image::load_png(&image_path(dir, &file_path), background)?;
        match size {
            None => size = Some((image.width, image.height)),
            Some(s) if s != (image.width, image.height) => {
                return Err(Error::Metadata(format!("{ctx}: image size differs from the first frame")));
            }
            _ => {}
        }
        let camera = Camera::new(image.width, image.height, fov_x, c2w)
            .map_err(|e| Error::Metadata(format!("{ctx}.transform_matrix: {e}")))?;
        frames.push(DatasetFrame {
            file_path,
            time,
            camera,
            image,
        });
    }
    let (lo, hi) = frames
        .iter()
        .fold((Real::INFINITY, Real::NEG_INFINITY), |(a, b), f| (a.min(f.time), b.max(f.time)));
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Metadata("frames: non-finite time".into()));
    }
    if lo < 0.0 || hi > 1.0 {
        let span = hi - lo;
        for f in &mut frames {
            f.time = if span > 0.0 { (f.time - lo) / span } else { 0.0 };
        }
    }
    let (width, height) = size.expect("at least one frame");
    Ok(SceneDataset {
        root: dir.to_path_buf(),
        fov_x,
        width,
        height,
        frames,
    })
}
