//! Questions about scenes and the corpora built from them.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::augment::Provenance;
use super::scene::{class_weights, gen_scene, gen_scene_with, weighted_pick, ObjectSpec, Placement, Quadrant, Scene};
use super::{SynthConfig, SynthError};
use crate::model::{TokenSequence, Vocab, COLORS, COUNTS, OBJECTS};

/// Side words in vocabulary order.
const LEFT: usize = 0;
const RIGHT: usize = 1;
const TOP: usize = 2;
const BOTTOM: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Query {
    /// "is there a X ?"
    Existence { class: usize },
    /// "are there K X ?", `count` in `1..=3`.
    Count { class: usize, count: usize },
    /// "is the X on the SIDE ?"
    Position { class: usize, side: usize },
    /// "is the X COLOR ?"
    Color { class: usize, color: usize },
    /// "describe ?"
    Caption,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmeSubtask {
    Existence,
    Count,
    Position,
    Color,
}

impl MmeSubtask {
    pub const ALL: [MmeSubtask; 4] = [
        MmeSubtask::Existence,
        MmeSubtask::Count,
        MmeSubtask::Position,
        MmeSubtask::Color,
    ];
}

impl Query {
    pub fn prompt(&self, v: &Vocab) -> Vec<usize> {
        let w = |s: &str| v.id(s).expect("fixed vocabulary word");
        match *self {
            Query::Existence { class } => vec![w("is"), w("there"), w("a"), v.object(class), w("?")],
            Query::Count { class, count } => vec![w("are"), w("there"), v.count(count - 1), v.object(class), w("?")],
            Query::Position { class, side } => {
                vec![w("is"), w("the"), v.object(class), w("on"), w("the"), v.side(side), w("?")]
            }
            Query::Color { class, color } => vec![w("is"), w("the"), v.object(class), v.color(color), w("?")],
            Query::Caption => vec![w("describe"), w("?")],
        }
    }

    pub fn subtask(&self) -> Option<MmeSubtask> {
        match self {
            Query::Existence { .. } => Some(MmeSubtask::Existence),
            Query::Count { .. } => Some(MmeSubtask::Count),
            Query::Position { .. } => Some(MmeSubtask::Position),
            Query::Color { .. } => Some(MmeSubtask::Color),
            Query::Caption => None,
        }
    }

    /// The ground-truth yes/no answer on `scene`; `None` for captions.
    pub fn truth(&self, scene: &Scene) -> Option<bool> {
        match *self {
            Query::Existence { class } => Some(scene.contains_class(class)),
            Query::Count { class, count } => Some(scene.count_of(class) == count),
            Query::Position { class, side } => Some(
                scene
                    .objects
                    .iter()
                    .enumerate()
                    .any(|(i, o)| o.class == class && side_holds(scene, i, side)),
            ),
            Query::Color { class, color } => Some(scene.objects.iter().any(|o| o.class == class && o.color == color)),
            Query::Caption => None,
        }
    }
}

fn side_holds(scene: &Scene, object: usize, side: usize) -> bool {
    let (r, c) = scene.objects[object].bbox.center();
    match side {
        LEFT => c < scene.grid_w / 2,
        RIGHT => c >= scene.grid_w / 2,
        TOP => r < scene.grid_h / 2,
        BOTTOM => r >= scene.grid_h / 2,
        _ => false,
    }
}

/// A (query, scene, label) triple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub id: u64,
    pub scene: Scene,
    pub query: Query,
    /// Yes/no label for polling questions.
    pub label: Option<bool>,
    /// Reference object classes for captions.
    pub caption: Option<Vec<usize>>,
    pub provenance: Option<Provenance>,
}

impl Example {
    pub fn polling(id: u64, scene: Scene, query: Query) -> Self {
        let label = query.truth(&scene);
        Self {
            id,
            scene,
            query,
            label,
            caption: None,
            provenance: None,
        }
    }

    pub fn captioning(id: u64, scene: Scene, max_objects: usize) -> Self {
        let mut caption = scene.raster_classes();
        caption.truncate(max_objects);
        Self {
            id,
            scene,
            query: Query::Caption,
            label: None,
            caption: Some(caption),
            provenance: None,
        }
    }

    pub fn prompt(&self, v: &Vocab) -> Vec<usize> {
        self.query.prompt(v)
    }

    /// Target tokens: `[yes|no, eos]` or the caption objects then `eos`.
    pub fn answer(&self, v: &Vocab) -> Vec<usize> {
        match (self.label, &self.caption) {
            (Some(true), _) => vec![v.yes(), v.eos()],
            (Some(false), _) => vec![v.no(), v.eos()],
            (None, Some(objs)) => objs.iter().map(|&c| v.object(c)).chain([v.eos()]).collect(),
            (None, None) => vec![v.eos()],
        }
    }

    /// Model input holding only the prompt.
    pub fn to_prompt(&self, patch_dim: usize) -> TokenSequence {
        TokenSequence::prompt(self.scene.render(patch_dim), self.prompt(&Vocab::new()))
    }

    /// Model input holding prompt and answer, for teacher-forced training.
    pub fn to_training(&self, patch_dim: usize) -> TokenSequence {
        let v = Vocab::new();
        TokenSequence::with_answer(self.scene.render(patch_dim), &self.prompt(&v), &self.answer(&v))
    }
}

fn absent_classes(scene: &Scene) -> Vec<usize> {
    (0..OBJECTS.len()).filter(|&c| !scene.contains_class(c)).collect()
}

fn zipf_among(rng: &mut impl Rng, cfg: &SynthConfig, classes: &[usize]) -> usize {
    let w = class_weights(cfg.zipf_exponent);
    let sub: Vec<f64> = classes.iter().map(|&c| w[c]).collect();
    classes[weighted_pick(rng, &sub)]
}

fn uniform_spec(class: Option<usize>) -> ObjectSpec {
    ObjectSpec {
        class,
        placement: Placement::Uniform,
    }
}

fn existence_item(rng: &mut impl Rng, cfg: &SynthConfig, id: u64, hot: Placement) -> Result<Example, SynthError> {
    let count = rng.random_range(cfg.min_objects.max(1)..=cfg.max_objects.max(1));
    if rng.random::<bool>() {
        let w = class_weights(cfg.zipf_exponent);
        let class = weighted_pick(rng, &w);
        let mut specs = vec![ObjectSpec {
            class: Some(class),
            placement: hot,
        }];
        specs.extend(std::iter::repeat_n(uniform_spec(None), count - 1));
        let scene = gen_scene_with(rng, cfg, &specs, id)?;
        Ok(Example::polling(id, scene, Query::Existence { class }))
    } else {
        let scene = gen_scene_with(rng, cfg, &vec![uniform_spec(None); count], id)?;
        let absent = absent_classes(&scene);
        let class = zipf_among(rng, cfg, &absent);
        Ok(Example::polling(id, scene, Query::Existence { class }))
    }
}

fn count_pair(rng: &mut impl Rng, scene: &Scene) -> Option<(Query, Query)> {
    let classes = scene.classes();
    let class = *classes.choose(rng)?;
    let k = scene.count_of(class);
    if k > COUNTS.len() {
        return None;
    }
    let wrong: Vec<usize> = (1..=COUNTS.len()).filter(|&c| c != k).collect();
    Some((
        Query::Count { class, count: k },
        Query::Count {
            class,
            count: *wrong.choose(rng)?,
        },
    ))
}

/// A class that occurs exactly once, so side and colour questions are unambiguous.
fn unique_object(rng: &mut impl Rng, scene: &Scene) -> Option<usize> {
    let unique: Vec<usize> = (0..scene.objects.len())
        .filter(|&i| scene.count_of(scene.objects[i].class) == 1)
        .collect();
    unique.choose(rng).copied()
}

fn position_pair(rng: &mut impl Rng, scene: &Scene) -> Option<(Query, Query)> {
    let i = unique_object(rng, scene)?;
    let class = scene.objects[i].class;
    let (a, b) = if rng.random::<bool>() { (LEFT, RIGHT) } else { (TOP, BOTTOM) };
    let (yes, no) = if side_holds(scene, i, a) { (a, b) } else { (b, a) };
    Some((Query::Position { class, side: yes }, Query::Position { class, side: no }))
}

fn color_pair(rng: &mut impl Rng, scene: &Scene) -> Option<(Query, Query)> {
    let i = unique_object(rng, scene)?;
    let o = scene.objects[i];
    let wrong: Vec<usize> = (0..COLORS.len()).filter(|&c| c != o.color).collect();
    Some((
        Query::Color {
            class: o.class,
            color: o.color,
        },
        Query::Color {
            class: o.class,
            color: *wrong.choose(rng)?,
        },
    ))
}

fn existence_pair(rng: &mut impl Rng, cfg: &SynthConfig, scene: &Scene) -> Option<(Query, Query)> {
    let class = *scene.classes().choose(rng)?;
    let absent = absent_classes(scene);
    if absent.is_empty() {
        return None;
    }
    let neg = zipf_among(rng, cfg, &absent);
    Some((Query::Existence { class }, Query::Existence { class: neg }))
}

/// Biased pretraining corpus. Positive existence items centre the queried
/// object in the hot quadrant with probability `hot_ratio`; everything else
/// is placed uniformly.
pub fn pretrain_corpus(cfg: &SynthConfig, n: usize, rng: &mut impl Rng) -> Result<Vec<Example>, SynthError> {
    cfg.validate()?;
    let hot = Placement::HotRegion {
        quadrant: cfg.hot_quadrant,
        ratio: cfg.hot_ratio,
    };
    let m = &cfg.mix;
    let weights = [m.existence, m.count, m.position, m.color, m.caption];
    let mut out = Vec::with_capacity(n);
    let mut id = 0u64;
    while out.len() < n {
        let kind = weighted_pick(rng, &weights);
        let item = match kind {
            0 => existence_item(rng, cfg, id, hot)?,
            4 => Example::captioning(id, gen_scene(rng, cfg, Placement::Uniform, id)?, cfg.caption_objects),
            _ => {
                let scene = if kind == 1 {
                    count_scene(rng, cfg, id)?
                } else {
                    gen_scene(rng, cfg, Placement::Uniform, id)?
                };
                let pair = match kind {
                    1 => count_pair(rng, &scene),
                    2 => position_pair(rng, &scene),
                    _ => color_pair(rng, &scene),
                };
                let Some((yes, no)) = pair else { continue };
                let q = if rng.random::<bool>() { yes } else { no };
                Example::polling(id, scene, q)
            }
        };
        out.push(item);
        id += 1;
    }
    Ok(out)
}

/// Scene holding one to three copies of a class, plus possibly one other object.
fn count_scene(rng: &mut impl Rng, cfg: &SynthConfig, id: u64) -> Result<Scene, SynthError> {
    let class = weighted_pick(rng, &class_weights(cfg.zipf_exponent));
    let k = rng.random_range(1..=COUNTS.len());
    let mut specs = vec![uniform_spec(Some(class)); k];
    if rng.random::<bool>() {
        let others: Vec<usize> = (0..OBJECTS.len()).filter(|&c| c != class).collect();
        specs.push(uniform_spec(Some(*others.choose(rng).expect("other classes"))));
    }
    gen_scene_with(rng, cfg, &specs, id)
}

/// Validation scenes split into the calibration part and the reported part.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub cal: Vec<Scene>,
    pub eval: Vec<Scene>,
}

/// Uniformly placed validation scenes; `cal_fraction` of them (rounded) form
/// the calibration split, the rest are held out for reporting.
pub fn split_validation(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<Splits, SynthError> {
    cfg.validate()?;
    let mut scenes = (0..cfg.n_validation)
        .map(|i| gen_scene(rng, cfg, Placement::Uniform, 1_000_000 + i as u64))
        .collect::<Result<Vec<_>, _>>()?;
    scenes.shuffle(rng);
    let n_cal = ((cfg.n_validation as f64) * cfg.cal_fraction).round() as usize;
    let eval = scenes.split_off(n_cal);
    Ok(Splits { cal: scenes, eval })
}

/// Balanced existence questions whose single object sits in `quadrant`.
/// Each scene yields one positive and one negative.
pub fn quadrant_polling_set(
    cfg: &SynthConfig,
    quadrant: Quadrant,
    n_scenes: usize,
    first_id: u64,
    rng: &mut impl Rng,
) -> Result<Vec<Example>, SynthError> {
    let mut out = Vec::with_capacity(2 * n_scenes);
    for i in 0..n_scenes {
        let id = first_id + i as u64;
        let spec = ObjectSpec {
            class: None,
            placement: Placement::Fixed { quadrant },
        };
        let scene = gen_scene_with(rng, cfg, &[spec], id)?;
        let (yes, no) = existence_pair(rng, cfg, &scene).expect("single-object scene has absent classes");
        out.push(Example::polling(2 * id, scene.clone(), yes));
        out.push(Example::polling(2 * id + 1, scene, no));
    }
    Ok(out)
}

/// One yes-question and one no-question per subtask for every scene that
/// supports all four; other scenes are skipped.
pub fn mme_items(cfg: &SynthConfig, scenes: &[Scene], rng: &mut impl Rng) -> Vec<Example> {
    let mut out = Vec::new();
    for scene in scenes {
        let pairs = [
            existence_pair(rng, cfg, scene),
            count_pair(rng, scene),
            position_pair(rng, scene),
            color_pair(rng, scene),
        ];
        if pairs.iter().any(Option::is_none) {
            log::warn!("scene {} cannot host every subtask; skipped", scene.id);
            continue;
        }
        for (yes, no) in pairs.into_iter().flatten() {
            let base = out.len() as u64;
            out.push(Example::polling(base, scene.clone(), yes));
            out.push(Example::polling(base + 1, scene.clone(), no));
        }
    }
    out
}

/// Captioning prompts with reference object lists.
pub fn caption_items(cfg: &SynthConfig, scenes: &[Scene]) -> Vec<Example> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| Example::captioning(i as u64, s.clone(), cfg.caption_objects))
        .collect()
}
