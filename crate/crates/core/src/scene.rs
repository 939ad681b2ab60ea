//! Synthetic bird's-eye-view worlds: axis-aligned boxes, boundary hit points,
//! clutter, per-agent occlusion masks, rasterization and dataset files.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{derive_seed, seeded};

/// Box width (along x) is drawn from this range, in meters.
pub const BOX_W_RANGE: (f64, f64) = (3.5, 4.5);
/// Box height (along y) is drawn from this range, in meters.
pub const BOX_H_RANGE: (f64, f64) = (1.6, 2.4);
/// Minimum gap kept between boxes and to the extent border.
pub const BOX_MARGIN: f64 = 0.5;
/// Boundary hit points per meter of box perimeter.
pub const POINTS_PER_METER: f64 = 4.0;
pub const POINT_JITTER: f64 = 0.05;
/// Clutter points per square meter.
pub const CLUTTER_DENSITY: f64 = 0.02;
/// Counts per cell saturate here before scaling to [0, 1].
pub const RASTER_CLIP: f64 = 8.0;
const PLACEMENT_TRIALS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Extent {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        if !(x_max > x_min && y_max > y_min)
            || ![x_min, x_max, y_min, y_max].iter().all(|v| v.is_finite())
        {
            return Err(Error::invalid(
                "extent",
                format!("[{x_min},{x_max}]x[{y_min},{y_max}]"),
            ));
        }
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
        })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }
}

/// Axis-aligned box given by center and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Aabb {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0() && x <= self.x1() && y >= self.y0() && y <= self.y1()
    }

    pub fn intersection(&self, o: &Aabb) -> f64 {
        let ix = (self.x1().min(o.x1()) - self.x0().max(o.x0())).max(0.0);
        let iy = (self.y1().min(o.y1()) - self.y0().max(o.y0())).max(0.0);
        ix * iy
    }

    /// Intersection over union; errors on boxes without positive area.
    pub fn iou(&self, o: &Aabb) -> Result<f64> {
        if self.is_degenerate() || o.is_degenerate() {
            return Err(Error::invalid(
                "box",
                format!("degenerate box in IoU: {self:?} / {o:?}"),
            ));
        }
        let inter = self.intersection(o);
        Ok(inter / (self.area() + o.area() - inter))
    }

    pub fn inside(&self, e: &Extent) -> bool {
        self.x0() >= e.x_min && self.x1() <= e.x_max && self.y0() >= e.y_min && self.y1() <= e.y_max
    }

    fn grown(&self, m: f64) -> Aabb {
        Aabb::new(self.cx, self.cy, self.w + 2.0 * m, self.h + 2.0 * m)
    }
}

/// A hit point and the index of the box that produced it (`-1` for clutter).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub owner: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub boxes: Vec<Aabb>,
    pub points: Vec<Point>,
    pub extent: Extent,
    pub seed: u64,
}

/// Which collaborator is looking at a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Viewpoint {
    Ego,
    Neighbor,
}

/// What one agent observes of a scene after occlusion masking.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentView {
    pub points: Vec<Point>,
    pub boxes: Vec<Aabb>,
}

impl Scene {
    /// Per-object visibility for both agents: each object is hidden from the
    /// ego, hidden from the neighbor, or seen by both with equal probability,
    /// and each clutter point is kept per agent with probability 1/2. Derived
    /// from the scene seed only.
    pub fn visibility(&self) -> (Vec<bool>, Vec<bool>, Vec<bool>, Vec<bool>) {
        let mut rng = seeded(derive_seed(self.seed, "occlusion"));
        let mut ego_obj = Vec::with_capacity(self.boxes.len());
        let mut neb_obj = Vec::with_capacity(self.boxes.len());
        for _ in &self.boxes {
            let k = rng.random_range(0..3u32);
            ego_obj.push(k != 0);
            neb_obj.push(k != 1);
        }
        let n_clutter = self.points.iter().filter(|p| p.owner < 0).count();
        let ego_clutter = (0..n_clutter).map(|_| rng.random_bool(0.5)).collect();
        let neb_clutter = (0..n_clutter).map(|_| rng.random_bool(0.5)).collect();
        (ego_obj, neb_obj, ego_clutter, neb_clutter)
    }

    pub fn view(&self, who: Viewpoint) -> AgentView {
        let (ego_obj, neb_obj, ego_cl, neb_cl) = self.visibility();
        let (obj, clutter) = match who {
            Viewpoint::Ego => (ego_obj, ego_cl),
            Viewpoint::Neighbor => (neb_obj, neb_cl),
        };
        let mut ci = 0;
        let points = self
            .points
            .iter()
            .filter(|p| {
                if p.owner < 0 {
                    ci += 1;
                    clutter[ci - 1]
                } else {
                    obj[p.owner as usize]
                }
            })
            .copied()
            .collect();
        let boxes = self
            .boxes
            .iter()
            .zip(&obj)
            .filter(|(_, v)| **v)
            .map(|(b, _)| *b)
            .collect();
        AgentView { points, boxes }
    }

    /// The unmasked scene as an agent view.
    pub fn full_view(&self) -> AgentView {
        AgentView {
            points: self.points.clone(),
            boxes: self.boxes.clone(),
        }
    }
}

/// Place `n_objects` non-overlapping boxes and sample their boundary points
/// plus uniform clutter. Pure function of its arguments.
pub fn generate_scene(seed: u64, n_objects: usize, extent: Extent) -> Result<Scene> {
    let mut rng = seeded(seed);
    let jitter = Normal::new(0.0, POINT_JITTER).expect("positive std");
    let mut boxes: Vec<Aabb> = Vec::with_capacity(n_objects);
    for i in 0..n_objects {
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIALS {
            let w = rng.random_range(BOX_W_RANGE.0..BOX_W_RANGE.1);
            let h = rng.random_range(BOX_H_RANGE.0..BOX_H_RANGE.1);
            let lo_x = extent.x_min + BOX_MARGIN + w / 2.0;
            let hi_x = extent.x_max - BOX_MARGIN - w / 2.0;
            let lo_y = extent.y_min + BOX_MARGIN + h / 2.0;
            let hi_y = extent.y_max - BOX_MARGIN - h / 2.0;
            if lo_x >= hi_x || lo_y >= hi_y {
                continue;
            }
            let cand = Aabb::new(
                rng.random_range(lo_x..hi_x),
                rng.random_range(lo_y..hi_y),
                w,
                h,
            );
            let grown = cand.grown(BOX_MARGIN);
            if boxes.iter().all(|b| grown.intersection(b) == 0.0) {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(b) => boxes.push(b),
            None => {
                return Err(Error::Generation(format!(
                    "could not place object {} of {n_objects} in {:.1}x{:.1} m after {PLACEMENT_TRIALS} trials",
                    i + 1,
                    extent.width(),
                    extent.height()
                )))
            }
        }
    }

    let mut points = Vec::new();
    for (idx, b) in boxes.iter().enumerate() {
        let perimeter = 2.0 * (b.w + b.h);
        let n = (perimeter * POINTS_PER_METER).round() as usize;
        for _ in 0..n {
            let t = rng.random_range(0.0..perimeter);
            let (x, y) = if t < b.w {
                (b.x0() + t, b.y0())
            } else if t < b.w + b.h {
                (b.x1(), b.y0() + (t - b.w))
            } else if t < 2.0 * b.w + b.h {
                (b.x1() - (t - b.w - b.h), b.y1())
            } else {
                (b.x0(), b.y1() - (t - 2.0 * b.w - b.h))
            };
            let (x, y) = (x + jitter.sample(&mut rng), y + jitter.sample(&mut rng));
            if extent.contains(x, y) {
                points.push(Point {
                    x,
                    y,
                    owner: idx as i64,
                });
            }
        }
    }
    let n_clutter = (CLUTTER_DENSITY * extent.area()).round() as usize;
    for _ in 0..n_clutter {
        let x = rng.random_range(extent.x_min..extent.x_max);
        let y = rng.random_range(extent.y_min..extent.y_max);
        points.push(Point { x, y, owner: -1 });
    }
    Ok(Scene {
        boxes,
        points,
        extent,
        seed,
    })
}

/// Regular BEV grid. Row index grows with y, column index with x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub cell_size: f64,
    pub height_cells: usize,
    pub width_cells: usize,
    pub origin: (f64, f64),
}

impl GridSpec {
    /// Grid exactly covering `extent` with square cells of `cell_size`.
    pub fn covering(extent: &Extent, cell_size: f64) -> Result<Self> {
        let wf = extent.width() / cell_size;
        let hf = extent.height() / cell_size;
        if cell_size.is_nan()
            || cell_size <= 0.0
            || (wf - wf.round()).abs() > 1e-9
            || (hf - hf.round()).abs() > 1e-9
        {
            return Err(Error::invalid(
                "grid",
                format!(
                    "cell size {cell_size} does not tile {}x{} m",
                    extent.width(),
                    extent.height()
                ),
            ));
        }
        Ok(Self {
            cell_size,
            height_cells: hf.round() as usize,
            width_cells: wf.round() as usize,
            origin: (extent.x_min, extent.y_min),
        })
    }

    pub fn cells(&self) -> usize {
        self.height_cells * self.width_cells
    }

    /// Grid with `factor`-times coarser cells.
    pub fn downsampled(&self, factor: usize) -> Self {
        Self {
            cell_size: self.cell_size * factor as f64,
            height_cells: self.height_cells / factor,
            width_cells: self.width_cells / factor,
            origin: self.origin,
        }
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin.0) / self.cell_size).floor();
        let r = ((y - self.origin.1) / self.cell_size).floor();
        if c < 0.0 || r < 0.0 || c >= self.width_cells as f64 || r >= self.height_cells as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.0 + (col as f64 + 0.5) * self.cell_size,
            self.origin.1 + (row as f64 + 0.5) * self.cell_size,
        )
    }
}

/// Raw per-cell point counts, `H×W` row-major.
pub fn point_counts(points: &[Point], grid: &GridSpec) -> Vec<f64> {
    let mut counts = vec![0.0; grid.cells()];
    for p in points {
        if let Some((r, c)) = grid.cell_of(p.x, p.y) {
            counts[r * grid.width_cells + c] += 1.0;
        }
    }
    counts
}

/// Occupancy image `[1×H×W]`: counts clipped at 8 and scaled to [0, 1].
pub fn rasterize_points(points: &[Point], grid: &GridSpec) -> Tensor {
    let data = point_counts(points, grid)
        .into_iter()
        .map(|c| c.min(RASTER_CLIP) / RASTER_CLIP)
        .collect();
    Tensor::from_parts(vec![1, grid.height_cells, grid.width_cells], data)
}

pub fn rasterize(scene: &Scene, grid: &GridSpec) -> Tensor {
    rasterize_points(&scene.points, grid)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Parameters that fully determine a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub scenes: usize,
    pub objects: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
    pub extent: Extent,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub spec: Option<DatasetSpec>,
    pub scenes: Vec<Scene>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn split(&self, which: Split) -> Vec<&Scene> {
        self.scenes
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == which)
            .map(|(sc, _)| sc)
            .collect()
    }
}

/// Scenes are assigned train, then val, then test by index.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.val_scenes + spec.test_scenes > spec.scenes {
        return Err(Error::invalid(
            "dataset",
            format!(
                "{} val + {} test scenes exceed {} total",
                spec.val_scenes, spec.test_scenes, spec.scenes
            ),
        ));
    }
    let n_train = spec.scenes - spec.val_scenes - spec.test_scenes;
    let mut scenes = Vec::with_capacity(spec.scenes);
    let mut splits = Vec::with_capacity(spec.scenes);
    for i in 0..spec.scenes {
        scenes.push(generate_scene(
            derive_seed(spec.seed, &format!("scene/{i}")),
            spec.objects,
            spec.extent,
        )?);
        splits.push(if i < n_train {
            Split::Train
        } else if i < n_train + spec.val_scenes {
            Split::Val
        } else {
            Split::Test
        });
    }
    Ok(Dataset {
        spec: Some(spec.clone()),
        scenes,
        splits,
    })
}

pub const DATASET_MAGIC: &[u8; 5] = b"PIDS1";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SceneHeader {
    seed: u64,
    split: Split,
    extent: Extent,
    boxes: usize,
    points: usize,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    version: u32,
    spec: Option<DatasetSpec>,
    scenes: Vec<SceneHeader>,
}

/// Magic, one JSON header line, then little-endian `f64` payload: per scene
/// its boxes as (cx, cy, w, h) followed by its points as (x, y, owner).
pub fn write_dataset(ds: &Dataset, mut w: impl Write) -> Result<()> {
    let header = DatasetHeader {
        version: DATASET_VERSION,
        spec: ds.spec.clone(),
        scenes: ds
            .scenes
            .iter()
            .zip(&ds.splits)
            .map(|(s, sp)| SceneHeader {
                seed: s.seed,
                split: *sp,
                extent: s.extent,
                boxes: s.boxes.len(),
                points: s.points.len(),
            })
            .collect(),
    };
    w.write_all(DATASET_MAGIC)?;
    w.write_all(b"\n")?;
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::new();
    for s in &ds.scenes {
        for b in &s.boxes {
            for v in [b.cx, b.cy, b.w, b.h] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for p in &s.points {
            for v in [p.x, p.y, p.owner as f64] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset(r: impl Read) -> Result<Dataset> {
    let mut r = BufReader::new(r);
    let mut magic = Vec::new();
    r.read_until(b'\n', &mut magic)?;
    if magic.is_empty() {
        return Ok(Dataset::default());
    }
    if magic.strip_suffix(b"\n") != Some(DATASET_MAGIC.as_slice()) {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Truncated("dataset header".into()));
    }
    let version: serde_json::Value = serde_json::from_slice(&line)?;
    let found = version.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != DATASET_VERSION {
        return Err(Error::Version {
            found,
            expected: DATASET_VERSION,
        });
    }
    let header: DatasetHeader = serde_json::from_value(version)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected: usize = header
        .scenes
        .iter()
        .map(|s| (4 * s.boxes + 3 * s.points) * 8)
        .sum();
    if payload.len() < expected {
        return Err(Error::Truncated(format!(
            "dataset payload has {} of {expected} bytes",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after dataset payload",
            payload.len() - expected
        )));
    }
    let mut vals = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut ds = Dataset {
        spec: header.spec,
        scenes: Vec::new(),
        splits: Vec::new(),
    };
    for sh in header.scenes {
        let mut next = || vals.next().expect("length checked");
        let boxes = (0..sh.boxes)
            .map(|_| Aabb::new(next(), next(), next(), next()))
            .collect();
        let points = (0..sh.points)
            .map(|_| Point {
                x: next(),
                y: next(),
                owner: next() as i64,
            })
            .collect();
        ds.scenes.push(Scene {
            boxes,
            points,
            extent: sh.extent,
            seed: sh.seed,
        });
        ds.splits.push(sh.split);
    }
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(ds, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(std::fs::File::open(path)?)
}
