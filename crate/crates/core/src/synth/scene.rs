//! Grid scenes, object placement and patch-feature rendering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{SynthConfig, SynthError};
use crate::model::{COLORS, OBJECTS};
use crate::ndgrad::Tensor;

/// Classes are grouped in threes; objects from one group tend to co-occur.
pub const GROUP_SIZE: usize = 3;

const PROTO_SEED: u64 = 0x5eed_0f_c0105;
const OBJECT_SCALE: f64 = 1.0;
const COLOR_SCALE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    /// Quadrant holding `(row, col)`; on odd grids the middle line goes to the bottom/right.
    pub fn of_cell(row: usize, col: usize, grid_h: usize, grid_w: usize) -> Self {
        match (row >= grid_h / 2, col >= grid_w / 2) {
            (false, false) => Quadrant::TopLeft,
            (false, true) => Quadrant::TopRight,
            (true, false) => Quadrant::BottomLeft,
            (true, true) => Quadrant::BottomRight,
        }
    }

    /// Whether cell `index` (raster order) lies in this quadrant.
    pub fn contains(self, index: usize, grid_h: usize, grid_w: usize) -> bool {
        Self::of_cell(index / grid_w, index % grid_w, grid_h, grid_w) == self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Placement {
    Uniform,
    /// Each object lands in `quadrant` with probability `ratio`, otherwise in
    /// one of the other three quadrants uniformly.
    HotRegion { quadrant: Quadrant, ratio: f64 },
    /// Every object is centred in the given quadrant.
    Fixed { quadrant: Quadrant },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub row: usize,
    pub col: usize,
    pub h: usize,
    pub w: usize,
}

impl BBox {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.h && c >= self.col && c < self.col + self.w
    }

    pub fn overlaps(&self, o: &BBox) -> bool {
        self.row < o.row + o.h && o.row < self.row + self.h && self.col < o.col + o.w && o.col < self.col + self.w
    }

    /// Cell the box is anchored to for quadrant and side decisions.
    pub fn center(&self) -> (usize, usize) {
        (self.row + (self.h - 1) / 2, self.col + (self.w - 1) / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    pub color: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub id: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub objects: Vec<SceneObject>,
    /// Seed of the per-cell feature noise.
    pub noise_seed: u64,
    pub sigma: f64,
}

/// Content of a meaningless input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "seed")]
pub enum BlankKind {
    White,
    Black,
    Noise(u64),
}

impl std::fmt::Display for BlankKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlankKind::White => f.write_str("white"),
            BlankKind::Black => f.write_str("black"),
            BlankKind::Noise(s) => write!(f, "noise({s})"),
        }
    }
}

struct Prototypes {
    objects: Vec<Vec<f64>>,
    colors: Vec<Vec<f64>>,
    white: Vec<f64>,
}

fn unit(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| scale * x / norm).collect()
}

impl Prototypes {
    fn new(patch_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PROTO_SEED ^ patch_dim as u64);
        let objects = (0..OBJECTS.len()).map(|_| unit(&mut rng, patch_dim, OBJECT_SCALE)).collect();
        let colors = (0..COLORS.len()).map(|_| unit(&mut rng, patch_dim, COLOR_SCALE)).collect();
        Self {
            objects,
            colors,
            white: white_prototype(patch_dim),
        }
    }
}

/// The reserved feature vector of an empty (white) cell.
pub fn white_prototype(patch_dim: usize) -> Vec<f64> {
    vec![1.0; patch_dim]
}

/// Noise-free feature of an object cell.
pub fn object_prototype(class: usize, color: usize, patch_dim: usize) -> Vec<f64> {
    let p = Prototypes::new(patch_dim);
    p.objects[class].iter().zip(&p.colors[color]).map(|(a, b)| a + b).collect()
}

/// Patch features of a meaningless input.
pub fn render_blank(kind: BlankKind, grid_h: usize, grid_w: usize, patch_dim: usize) -> Tensor {
    let n = grid_h * grid_w;
    match kind {
        BlankKind::White => {
            let w = white_prototype(patch_dim);
            Tensor::matrix(n, patch_dim, w.repeat(n)).expect("shape")
        }
        BlankKind::Black => Tensor::zeros(&[n, patch_dim]),
        BlankKind::Noise(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..n * patch_dim).map(|_| rng.random_range(0.0..1.0)).collect();
            Tensor::matrix(n, patch_dim, data).expect("shape")
        }
    }
}

impl Scene {
    pub fn empty(id: u64, grid_h: usize, grid_w: usize, noise_seed: u64, sigma: f64) -> Self {
        Self {
            id,
            grid_h,
            grid_w,
            objects: Vec::new(),
            noise_seed,
            sigma,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Owning object index for each cell in raster order.
    pub fn cells(&self) -> Vec<Option<usize>> {
        let mut cells = vec![None; self.n_cells()];
        for (i, o) in self.objects.iter().enumerate() {
            for r in o.bbox.row..o.bbox.row + o.bbox.h {
                for c in o.bbox.col..o.bbox.col + o.bbox.w {
                    cells[r * self.grid_w + c] = Some(i);
                }
            }
        }
        cells
    }

    pub fn quadrant_of(&self, object: usize) -> Quadrant {
        let (r, c) = self.objects[object].bbox.center();
        Quadrant::of_cell(r, c, self.grid_h, self.grid_w)
    }

    pub fn contains_class(&self, class: usize) -> bool {
        self.objects.iter().any(|o| o.class == class)
    }

    pub fn count_of(&self, class: usize) -> usize {
        self.objects.iter().filter(|o| o.class == class).count()
    }

    /// Distinct classes present, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.objects.iter().map(|o| o.class).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Object classes ordered by the raster position of each box's top-left cell.
    pub fn raster_classes(&self) -> Vec<usize> {
        let mut objs: Vec<&SceneObject> = self.objects.iter().collect();
        objs.sort_by_key(|o| (o.bbox.row, o.bbox.col));
        objs.iter().map(|o| o.class).collect()
    }

    /// Patch features `[n × patch_dim]`: object and colour prototypes plus
    /// Gaussian noise on occupied cells, the exact white prototype elsewhere.
    pub fn render(&self, patch_dim: usize) -> Tensor {
        let protos = Prototypes::new(patch_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let noise = Normal::new(0.0, self.sigma.max(0.0)).expect("finite sigma");
        let mut data = Vec::with_capacity(self.n_cells() * patch_dim);
        for owner in self.cells() {
            match owner {
                None => data.extend_from_slice(&protos.white),
                Some(i) => {
                    let o = &self.objects[i];
                    for k in 0..patch_dim {
                        let base = protos.objects[o.class][k] + protos.colors[o.color][k];
                        let eps = if self.sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        data.push(base + eps);
                    }
                }
            }
        }
        Tensor::matrix(self.n_cells(), patch_dim, data).expect("shape")
    }
}

/// Zipf-like class weights `1 / (rank + 1)^s` in class-id order.
pub fn class_weights(exponent: f64) -> Vec<f64> {
    (0..OBJECTS.len()).map(|c| 1.0 / ((c + 1) as f64).powf(exponent)).collect()
}

pub(crate) fn weighted_pick(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn draw_class(rng: &mut impl Rng, cfg: &SynthConfig, anchor: Option<usize>) -> usize {
    let weights = class_weights(cfg.zipf_exponent);
    match anchor {
        Some(a) if rng.random::<f64>() < cfg.group_affinity => {
            let g = a / GROUP_SIZE * GROUP_SIZE;
            g + weighted_pick(rng, &weights[g..g + GROUP_SIZE])
        }
        _ => weighted_pick(rng, &weights),
    }
}

/// Requested class and placement of one object in [`gen_scene_with`].
#[derive(Clone, Copy, Debug)]
pub struct ObjectSpec {
    pub class: Option<usize>,
    pub placement: Placement,
}

fn target_quadrant(rng: &mut impl Rng, placement: Placement) -> Option<Quadrant> {
    match placement {
        Placement::Uniform => None,
        Placement::Fixed { quadrant } => Some(quadrant),
        Placement::HotRegion { quadrant, ratio } => {
            if rng.random::<f64>() < ratio {
                Some(quadrant)
            } else {
                let others: Vec<Quadrant> = Quadrant::ALL.iter().copied().filter(|&q| q != quadrant).collect();
                Some(others[rng.random_range(0..others.len())])
            }
        }
    }
}

fn place(
    rng: &mut impl Rng,
    cfg: &SynthConfig,
    taken: &[SceneObject],
    quadrant: Option<Quadrant>,
) -> Option<BBox> {
    let h = rng.random_range(cfg.min_size..=cfg.max_size);
    let w = rng.random_range(cfg.min_size..=cfg.max_size);
    if h > cfg.grid_h || w > cfg.grid_w {
        return None;
    }
    let mut options = Vec::new();
    for row in 0..=cfg.grid_h - h {
        for col in 0..=cfg.grid_w - w {
            let b = BBox { row, col, h, w };
            if taken.iter().any(|o| o.bbox.overlaps(&b)) {
                continue;
            }
            if let Some(q) = quadrant {
                let (r, c) = b.center();
                if Quadrant::of_cell(r, c, cfg.grid_h, cfg.grid_w) != q {
                    continue;
                }
            }
            options.push(b);
        }
    }
    (!options.is_empty()).then(|| options[rng.random_range(0..options.len())])
}

pub const MAX_PACKING_ATTEMPTS: usize = 100;
const SIZE_REDRAWS: usize = 16;

/// Scene with a random object count in `cfg.min_objects..=cfg.max_objects`,
/// all placed by `placement`.
pub fn gen_scene(rng: &mut impl Rng, cfg: &SynthConfig, placement: Placement, id: u64) -> Result<Scene, SynthError> {
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let specs = vec![ObjectSpec { class: None, placement }; count];
    gen_scene_with(rng, cfg, &specs, id)
}

/// Scene with one object per spec. Classes left open are drawn from the
/// co-occurrence model anchored on the first object.
pub fn gen_scene_with(rng: &mut impl Rng, cfg: &SynthConfig, specs: &[ObjectSpec], id: u64) -> Result<Scene, SynthError> {
    for _ in 0..MAX_PACKING_ATTEMPTS {
        let mut objects: Vec<SceneObject> = Vec::with_capacity(specs.len());
        let mut ok = true;
        for spec in specs {
            let anchor = objects.first().map(|o| o.class);
            let class = spec.class.unwrap_or_else(|| draw_class(rng, cfg, anchor));
            let color = rng.random_range(0..COLORS.len());
            let q = target_quadrant(rng, spec.placement);
            // Redraw only the size before giving up, so the quadrant mix stays as drawn.
            let bbox = (0..SIZE_REDRAWS).find_map(|_| place(rng, cfg, &objects, q));
            match bbox {
                Some(bbox) => objects.push(SceneObject { class, color, bbox }),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(Scene {
                id,
                grid_h: cfg.grid_h,
                grid_w: cfg.grid_w,
                objects,
                noise_seed: rng.random(),
                sigma: cfg.noise_sigma,
            });
        }
    }
    Err(SynthError::Infeasible {
        attempts: MAX_PACKING_ATTEMPTS,
        detail: format!("{} objects on a {}x{} grid", specs.len(), cfg.grid_h, cfg.grid_w),
    })
}
