//! Procedural scenes, analytic annotators and in-context batches.
//!
//! Images and maps live in `[-1, 1]` with layout `[3, H, W]` per item and
//! `[N, 3, H, W]` per batch.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Float, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MapKind {
    Edge,
    Seg,
    Depth,
    /// Held out: hard-thresholded edges.
    CannyLike,
    /// Held out: edges of a half-resolution image, giving thick strokes.
    ScribbleLike,
}

impl MapKind {
    pub const TRAINING: [MapKind; 3] = [MapKind::Edge, MapKind::Seg, MapKind::Depth];
    pub const HELD_OUT: [MapKind; 2] = [MapKind::CannyLike, MapKind::ScribbleLike];

    pub fn is_held_out(self) -> bool {
        Self::HELD_OUT.contains(&self)
    }

    pub fn name(self) -> &'static str {
        match self {
            MapKind::Edge => "edge",
            MapKind::Seg => "seg",
            MapKind::Depth => "depth",
            MapKind::CannyLike => "canny_like",
            MapKind::ScribbleLike => "scribble_like",
        }
    }
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::TRAINING.as_slice(), Self::HELD_OUT.as_slice()]
            .concat()
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown map kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Map2Image,
    Image2Map,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Map2Image => "map2image",
            Direction::Image2Map => "image2map",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Direction::Map2Image => Direction::Image2Map,
            Direction::Image2Map => Direction::Map2Image,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "map2image" => Ok(Direction::Map2Image),
            "image2map" => Ok(Direction::Image2Map),
            _ => Err(Error::invalid(format!("unknown direction {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TaskKind {
    pub map: MapKind,
    pub direction: Direction,
}

impl TaskKind {
    pub const COUNT: usize = 6;

    pub fn new(map: MapKind, direction: Direction) -> Self {
        Self { map, direction }
    }

    /// The six training tasks in id order: edge, seg, depth, each as
    /// Image2Map then Map2Image.
    pub fn training() -> [TaskKind; 6] {
        let mut out = [TaskKind::new(MapKind::Edge, Direction::Image2Map); 6];
        for (i, m) in MapKind::TRAINING.iter().enumerate() {
            out[2 * i] = TaskKind::new(*m, Direction::Image2Map);
            out[2 * i + 1] = TaskKind::new(*m, Direction::Map2Image);
        }
        out
    }

    /// Zero-based id among the training tasks; held-out kinds have none.
    pub fn id(self) -> Result<usize> {
        Self::training()
            .iter()
            .position(|t| *t == self)
            .ok_or_else(|| Error::invalid(format!("task {self} is held out and has no id")))
    }

    /// Task-table row used when conditioning on this task. Held-out kinds
    /// are edge-like and borrow the edge row of the same direction.
    pub fn route_id(self) -> usize {
        let map = if self.map.is_held_out() { MapKind::Edge } else { self.map };
        TaskKind::new(map, self.direction).id().expect("training kinds have ids")
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::training().get(id).copied().ok_or(Error::UnknownTask { id, count: Self::COUNT })
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.map, self.direction)
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    /// Accepts `edge/image2map` and the short forms `image2edge`, `edge2image`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some((m, d)) = s.split_once('/') {
            return Ok(TaskKind::new(m.parse()?, d.parse()?));
        }
        if let Some(m) = s.strip_prefix("image2") {
            return Ok(TaskKind::new(m.parse()?, Direction::Image2Map));
        }
        if let Some(m) = s.strip_suffix("2image") {
            return Ok(TaskKind::new(m.parse()?, Direction::Map2Image));
        }
        Err(Error::invalid(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Geometry {
    Circle { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle { p: [(f64, f64); 3] },
}

impl Geometry {
    /// Point test in unit-canvas coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Geometry::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Geometry::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Geometry::Triangle { p } => {
                let cross = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let d = [cross(p[0], p[1]), cross(p[1], p[2]), cross(p[2], p[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }

    /// Area as a fraction of the unit canvas.
    pub fn area(&self) -> f64 {
        match *self {
            Geometry::Circle { r, .. } => std::f64::consts::PI * r * r,
            Geometry::Rect { x0, y0, x1, y1 } => (x1 - x0) * (y1 - y0),
            Geometry::Triangle { p } => {
                0.5 * ((p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1)).abs()
            }
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Geometry::Circle { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
            Geometry::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            Geometry::Triangle { p } => {
                let xs = p.map(|q| q.0);
                let ys = p.map(|q| q.1);
                let min = |v: [f64; 3]| v.iter().copied().fold(f64::INFINITY, f64::min);
                let max = |v: [f64; 3]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (min(xs), min(ys), max(xs), max(ys))
            }
        }
    }

    pub fn inside_canvas(&self) -> bool {
        let (x0, y0, x1, y1) = self.bounds();
        x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub geometry: Geometry,
    pub color: [f64; 3],
    /// Larger ranks are nearer to the viewer and drawn on top.
    pub depth_rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub shapes: Vec<ShapeSpec>,
    /// Linear gradient from `bg_from` to `bg_to` along the unit direction `bg_dir`.
    pub bg_from: [f64; 3],
    pub bg_to: [f64; 3],
    pub bg_dir: (f64, f64),
}

impl SceneSpec {
    /// Draws 2 to 5 shapes with unique depth ranks, all inside the canvas.
    pub fn random(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let n = rng.int_inclusive(2, 5);
        let mut ranks: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            ranks.swap(i, rng.int_inclusive(0, i));
        }
        let color = |rng: &mut Rng, lo: f64, hi: f64| [0; 3].map(|_| rng.uniform_range(lo, hi));
        let bg_from = color(&mut rng, -0.6, 0.2);
        let bg_to = color(&mut rng, -0.6, 0.2);
        let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
        let shapes = ranks
            .into_iter()
            .map(|depth_rank| {
                let geometry = match rng.int_inclusive(0, 2) {
                    0 => {
                        let r = rng.uniform_range(0.1, 0.25);
                        Geometry::Circle { cx: rng.uniform_range(r, 1.0 - r), cy: rng.uniform_range(r, 1.0 - r), r }
                    }
                    1 => {
                        let (hw, hh) = (rng.uniform_range(0.08, 0.25), rng.uniform_range(0.08, 0.25));
                        let (cx, cy) = (rng.uniform_range(hw, 1.0 - hw), rng.uniform_range(hh, 1.0 - hh));
                        Geometry::Rect { x0: cx - hw, y0: cy - hh, x1: cx + hw, y1: cy + hh }
                    }
                    _ => {
                        let r = rng.uniform_range(0.12, 0.3);
                        let (cx, cy) = (rng.uniform_range(r, 1.0 - r), rng.uniform_range(r, 1.0 - r));
                        let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
                        let p = [0.0, 1.0, 2.0].map(|k: f64| {
                            let a = theta + k * std::f64::consts::TAU / 3.0;
                            (cx + r * a.cos(), cy + r * a.sin())
                        });
                        Geometry::Triangle { p }
                    }
                };
                ShapeSpec { geometry, color: color(&mut rng, -0.9, 0.9), depth_rank }
            })
            .collect();
        Self { shapes, bg_from, bg_to, bg_dir: (angle.cos(), angle.sin()) }
    }

    /// A scene with no shapes.
    pub fn background_only(&self) -> Self {
        Self { shapes: Vec::new(), ..self.clone() }
    }

    fn background(&self, x: f64, y: f64) -> [f64; 3] {
        let proj = (x - 0.5) * self.bg_dir.0 + (y - 0.5) * self.bg_dir.1;
        let s = (proj / std::f64::consts::SQRT_2 + 0.5).clamp(0.0, 1.0);
        [0, 1, 2].map(|c| self.bg_from[c] + (self.bg_to[c] - self.bg_from[c]) * s)
    }

    /// Index of the nearest shape covering the point, if any.
    pub fn top_shape(&self, x: f64, y: f64) -> Option<usize> {
        self.shapes
            .iter()
            .enumerate()
            .filter(|(_, s)| s.geometry.contains(x, y))
            .max_by_key(|(_, s)| s.depth_rank)
            .map(|(i, _)| i)
    }
}

/// Fixed label colours for the segmentation map, indexed by shape order.
const SEG_PALETTE: [[f64; 3]; 5] = [
    [1.0, -1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, 1.0],
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, 1.0],
];
const SEG_BACKGROUND: [f64; 3] = [-1.0, -1.0, -1.0];
const SUPERSAMPLE: usize = 4;

/// A rendered scene with exact ground-truth maps.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Tensor<f64>,
    /// 1 where a shape boundary crosses the pixel, 0 elsewhere.
    pub edge: Tensor<f64>,
    /// Label colours per shape index, anti-aliased like the image.
    pub seg: Tensor<f64>,
    /// Depth-rank shading, anti-aliased like the image.
    pub depth: Tensor<f64>,
    /// Top shape at each pixel centre, row-major.
    pub labels: Vec<Option<usize>>,
}

pub fn render_scene(spec: &SceneSpec, size: usize) -> Result<Scene> {
    if size < 8 {
        return Err(Error::invalid(format!("scene size must be at least 8, got {size}")));
    }
    let hw = size * size;
    let mut image = vec![0.0; 3 * hw];
    let mut edge = vec![0.0; 3 * hw];
    let mut seg = vec![0.0; 3 * hw];
    let mut depth = vec![0.0; 3 * hw];
    let mut labels = Vec::with_capacity(hw);
    let inv = 1.0 / size as f64;
    let sub = 1.0 / SUPERSAMPLE as f64;
    for py in 0..size {
        for px in 0..size {
            let mut acc = [0.0; 3];
            let mut seg_acc = [0.0; 3];
            let mut depth_acc = 0.0;
            let mut first: Option<Option<usize>> = None;
            let mut boundary = false;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (px as f64 + (sx as f64 + 0.5) * sub) * inv;
                    let y = (py as f64 + (sy as f64 + 0.5) * sub) * inv;
                    let top = spec.top_shape(x, y);
                    let (c, sc, d) = match top {
                        Some(i) => (spec.shapes[i].color, SEG_PALETTE[i % SEG_PALETTE.len()], depth_shade(spec, i)),
                        None => (spec.background(x, y), SEG_BACKGROUND, -1.0),
                    };
                    for k in 0..3 {
                        acc[k] += c[k];
                        seg_acc[k] += sc[k];
                    }
                    depth_acc += d;
                    match first {
                        None => first = Some(top),
                        Some(f) if f != top => boundary = true,
                        _ => {}
                    }
                }
            }
            let (cx, cy) = ((px as f64 + 0.5) * inv, (py as f64 + 0.5) * inv);
            labels.push(spec.top_shape(cx, cy));
            let norm = (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let p = py * size + px;
            for k in 0..3 {
                image[k * hw + p] = acc[k] / norm;
                edge[k * hw + p] = if boundary { 1.0 } else { 0.0 };
                seg[k * hw + p] = seg_acc[k] / norm;
                depth[k * hw + p] = depth_acc / norm;
            }
        }
    }
    let shape = [3, size, size];
    Ok(Scene {
        image: Tensor::from_vec(&shape, image)?,
        edge: Tensor::from_vec(&shape, edge)?,
        seg: Tensor::from_vec(&shape, seg)?,
        depth: Tensor::from_vec(&shape, depth)?,
        labels,
    })
}

/// Nearer shapes are brighter; the background sits at -1.
fn depth_shade(spec: &SceneSpec, i: usize) -> f64 {
    -1.0 + 2.0 * (spec.shapes[i].depth_rank + 1) as f64 / spec.shapes.len() as f64
}

/// Renders the scene drawn from `seed`.
pub fn gen_scene(seed: u64, size: usize) -> Result<Scene> {
    render_scene(&SceneSpec::random(seed), size)
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const EDGE_DELTA: f64 = 1e-2;
const EDGE_SCALE: f64 = 4.0;
const SEG_LEVELS: usize = 4;
const SEG_TAU: f64 = 0.1;

fn luminance<F: Float>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let w = g.constant(Tensor::from_vec(&[1, 3, 1, 1], LUMA.map(F::of).to_vec())?);
    g.conv2d(x, w, None, 1, 0)
}

fn replicate3<F: Float>(g: &mut Graph<F>, y: Var) -> Result<Var> {
    g.concat_channels(&[y, y, y])
}

/// Sobel gradient magnitude of luminance, smoothly mapped so that a flat
/// image gives -1 and strong edges approach 1. Single channel.
fn sobel_magnitude<F: Float>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let l = luminance(g, x)?;
    let p = g.pad_replicate(l, 1)?;
    #[rustfmt::skip]
    let k = [
        -1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0,
        -1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0,
    ];
    let w = g.constant(Tensor::from_vec(&[2, 1, 3, 3], k.map(F::of).to_vec())?);
    let grads = g.conv2d(p, w, None, 1, 0)?;
    let sq = g.square(grads)?;
    let ones = g.constant(Tensor::full(&[1, 2, 1, 1], F::one()));
    let energy = g.conv2d(sq, ones, None, 1, 0)?;
    let delta = F::of(EDGE_DELTA);
    let shifted = g.affine(energy, F::one(), delta)?;
    let root = g.sqrt(shifted)?;
    g.affine(root, F::one(), -delta.sqrt())
}

fn edge_map<F: Float>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let mag = sobel_magnitude(g, x)?;
    let scaled = g.scale(mag, F::of(1.0 / EDGE_SCALE))?;
    let t = g.tanh(scaled)?;
    let y = g.affine(t, F::of(2.0), -F::one())?;
    replicate3(g, y)
}

fn canny_like_map<F: Float>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let mag = sobel_magnitude(g, x)?;
    let z = g.affine(mag, F::of(4.0), F::of(-4.0))?;
    let s = g.sigmoid(z)?;
    let y = g.affine(s, F::of(2.0), -F::one())?;
    replicate3(g, y)
}

fn seg_map<F: Float>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let step = 2.0 / (SEG_LEVELS - 1) as f64;
    let mut acc: Option<Var> = None;
    for k in 1..SEG_LEVELS {
        let threshold = -1.0 + step * (k as f64 - 0.5);
        let z = g.affine(x, F::of(1.0 / SEG_TAU), F::of(-threshold / SEG_TAU))?;
        let s = g.sigmoid(z)?;
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    let total = acc.expect("at least two levels");
    g.affine(total, F::of(step), -F::one())
}

fn depth_map<F: Float>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let l = luminance(g, x)?;
    let p = g.pad_replicate(l, 1)?;
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], F::of(1.0 / 9.0)));
    let y = g.conv2d(p, w, None, 1, 0)?;
    replicate3(g, y)
}

/// Records the annotator for `kind` on `g`. Input and output are `[N,3,H,W]`.
pub fn annotate_graph<F: Float>(g: &mut Graph<F>, x: Var, kind: MapKind) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape("annotate", format!("expected [N,3,H,W], got {s:?}")));
    }
    match kind {
        MapKind::Edge => edge_map(g, x),
        MapKind::Seg => seg_map(g, x),
        MapKind::Depth => depth_map(g, x),
        MapKind::CannyLike => canny_like_map(g, x),
        MapKind::ScribbleLike => {
            let down = g.avg_pool2x(x)?;
            let e = edge_map(g, down)?;
            g.upsample2x(e)
        }
    }
}

/// Annotates a `[3,H,W]` image or a `[N,3,H,W]` batch.
pub fn annotate<F: Float>(x: &Tensor<F>, kind: MapKind) -> Result<Tensor<F>> {
    let batched = match x.shape().len() {
        4 => x.clone(),
        3 => x.unsqueeze0(),
        _ => return Err(Error::shape("annotate", format!("{:?}", x.shape()))),
    };
    let mut g = Graph::new();
    let v = g.constant(batched);
    let y = annotate_graph(&mut g, v, kind)?;
    let out = g.value(y).clone();
    if x.shape().len() == 3 {
        out.reshape(x.shape())
    } else {
        Ok(out)
    }
}

/// One in-context item. `example_seed` and `scene_seed` name the scenes
/// behind the example pair and the query/target.
#[derive(Clone, Debug)]
pub struct ContextSample<F: Float> {
    pub example_src: Tensor<F>,
    pub example_tgt: Tensor<F>,
    pub query: Tensor<F>,
    pub target: Tensor<F>,
    pub task: TaskKind,
    pub example_seed: u64,
    pub scene_seed: u64,
}

/// A batch of in-context items sharing one task, stacked as `[N,3,H,W]`.
#[derive(Clone, Debug)]
pub struct ContextBatch<F: Float> {
    pub task: TaskKind,
    pub example_src: Tensor<F>,
    pub example_tgt: Tensor<F>,
    pub query: Tensor<F>,
    pub target: Tensor<F>,
    pub example_seeds: Vec<u64>,
    pub scene_seeds: Vec<u64>,
}

impl<F: Float> ContextBatch<F> {
    pub fn len(&self) -> usize {
        self.scene_seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scene_seeds.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.target.shape()[3]
    }

    pub fn item(&self, i: usize) -> Result<ContextSample<F>> {
        let pick = |t: &Tensor<F>| -> Result<Tensor<F>> {
            let s = t.slice_outer(i, 1)?;
            s.reshape(&t.shape()[1..])
        };
        Ok(ContextSample {
            example_src: pick(&self.example_src)?,
            example_tgt: pick(&self.example_tgt)?,
            query: pick(&self.query)?,
            target: pick(&self.target)?,
            task: self.task,
            example_seed: self.example_seeds[i],
            scene_seed: self.scene_seeds[i],
        })
    }

    pub fn from_samples(items: &[ContextSample<F>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::invalid("empty batch"))?;
        if items.iter().any(|s| s.task != first.task) {
            return Err(Error::invalid("batch items must share one task"));
        }
        let stack = |f: fn(&ContextSample<F>) -> &Tensor<F>| {
            Tensor::concat_outer(&items.iter().map(|s| f(s).unsqueeze0()).collect::<Vec<_>>())
        };
        Ok(Self {
            task: first.task,
            example_src: stack(|s| &s.example_src)?,
            example_tgt: stack(|s| &s.example_tgt)?,
            query: stack(|s| &s.query)?,
            target: stack(|s| &s.target)?,
            example_seeds: items.iter().map(|s| s.example_seed).collect(),
            scene_seeds: items.iter().map(|s| s.scene_seed).collect(),
        })
    }

    /// Example pair concatenated along channels, `[N,6,H,W]`.
    pub fn example_pair(&self) -> Result<Tensor<F>> {
        let (n, c, h, w) = dims4(&self.example_src)?;
        let per = c * h * w;
        let mut out = Vec::with_capacity(2 * self.example_src.len());
        for i in 0..n {
            out.extend_from_slice(&self.example_src.data()[i * per..(i + 1) * per]);
            out.extend_from_slice(&self.example_tgt.data()[i * per..(i + 1) * per]);
        }
        Tensor::from_vec(&[n, 2 * c, h, w], out)
    }
}

fn dims4<F: Float>(t: &Tensor<F>) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape("dims4", format!("{s:?}"))),
    }
}

/// Draws `n` pairs of distinct scene seeds; depends on `seed` only.
pub fn draw_scene_seeds(n: usize, seed: u64) -> Vec<(u64, u64)> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let a = rng.next_u64();
            let mut b = rng.next_u64();
            while b == a {
                b = rng.next_u64();
            }
            (a, b)
        })
        .collect()
}

/// Builds `n` items for `task`: scene A gives the example pair, scene B
/// the query and target, oriented by the task direction.
pub fn make_context_batch<F: Float>(task: TaskKind, n: usize, seed: u64, size: usize) -> Result<ContextBatch<F>> {
    if n == 0 {
        return Err(Error::invalid("make_context_batch needs n >= 1"));
    }
    let seeds = draw_scene_seeds(n, seed);
    let mut examples = Vec::with_capacity(n);
    let mut queries = Vec::with_capacity(n);
    for &(a, b) in &seeds {
        examples.push(gen_scene(a, size)?.image.cast::<F>().unsqueeze0());
        queries.push(gen_scene(b, size)?.image.cast::<F>().unsqueeze0());
    }
    let ex_img = Tensor::concat_outer(&examples)?;
    let q_img = Tensor::concat_outer(&queries)?;
    let ex_map = annotate(&ex_img, task.map)?;
    let q_map = annotate(&q_img, task.map)?;
    let (example_src, example_tgt, query, target) = match task.direction {
        Direction::Image2Map => (ex_img, ex_map, q_img, q_map),
        Direction::Map2Image => (ex_map, ex_img, q_map, q_img),
    };
    Ok(ContextBatch {
        task,
        example_src,
        example_tgt,
        query,
        target,
        example_seeds: seeds.iter().map(|s| s.0).collect(),
        scene_seeds: seeds.iter().map(|s| s.1).collect(),
    })
}

/// Training-time batch assembly; held-out map kinds are rejected.
pub fn make_training_batch<F: Float>(task: TaskKind, n: usize, seed: u64, size: usize) -> Result<ContextBatch<F>> {
    if task.map.is_held_out() {
        return Err(Error::invalid(format!("held-out task {task} cannot appear in training")));
    }
    make_context_batch(task, n, seed, size)
}

fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u8
}

/// Writes a `[3,H,W]` image in `[-1,1]` as binary PPM.
pub fn write_ppm<F: Float>(path: &Path, img: &Tensor<F>) -> Result<()> {
    let bytes = encode_ppm(img)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn encode_ppm<F: Float>(img: &Tensor<F>) -> Result<Vec<u8>> {
    let (c, h, w) = match *img.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape("encode_ppm", format!("{s:?}"))),
    };
    if c != 3 {
        return Err(Error::shape("encode_ppm", format!("{c} channels")));
    }
    let mut out = Vec::with_capacity(20 + 3 * h * w);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let d = img.data();
    for p in 0..h * w {
        for k in 0..3 {
            out.push(to_byte(d[k * h * w + p].f64()));
        }
    }
    Ok(out)
}

/// Reads a binary PPM into a `[3,H,W]` tensor in `[-1,1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f64>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::invalid("truncated PPM header"));
        }
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(str::to_owned));
    }
    if tokens[0] != "P6" || tokens[3] != "255" {
        return Err(Error::invalid("only 8-bit P6 PPM is supported"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::invalid(format!("bad PPM dimension {s:?}")));
    let (w, h) = (parse(&tokens[1])?, parse(&tokens[2])?);
    let mut raw = vec![0u8; 3 * w * h];
    r.read_exact(&mut raw)?;
    let mut out = vec![0.0; 3 * w * h];
    for p in 0..w * h {
        for k in 0..3 {
            out[k * w * h + p] = raw[3 * p + k] as f64 / 255.0 * 2.0 - 1.0;
        }
    }
    Tensor::from_vec(&[3, h, w], out)
}
