use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::Deserializer;
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::model::PatchGrid;
use crate::taskgen::{
    generate_map, plan_shortest, render_helper, render_map, simulate, synthesize_thoughts, Action, HelperImage, HelperMode,
    Outcome, TaskInstance, PATCH_FEATURE_DIM,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Reason,
    Plan,
    Jigsaw,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Reason => "reason",
            TaskKind::Plan => "plan",
            TaskKind::Jigsaw => "jigsaw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reason" => Ok(TaskKind::Reason),
            "plan" => Ok(TaskKind::Plan),
            "jigsaw" => Ok(TaskKind::Jigsaw),
            _ => Err(Error::config("task", format!("unknown task {s:?}"))),
        }
    }

    pub fn is_grid(self) -> bool {
        self != TaskKind::Jigsaw
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Direct,
    Cot,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Variant::Direct),
            "cot" => Ok(Variant::Cot),
            _ => Err(Error::config("variant", format!("unknown variant {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Direct => "direct",
            Variant::Cot => "cot",
        }
    }
}

/// One example: question images and text, thoughts split around a helper
/// image, and the answer. Question-only samples have empty thoughts and no
/// helper.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySample {
    pub id: String,
    pub task: TaskKind,
    pub level: usize,
    pub variant: Variant,
    pub question_text: String,
    pub input_images: Vec<PatchGrid>,
    pub o_pre: String,
    pub helper: Option<HelperImage>,
    pub o_post: String,
    pub answer: String,
    pub seed: u64,
}

/// Map and action sequence behind a reasoning question. The outcome class is
/// drawn uniformly first and action sequences are resampled until they hit it.
pub fn reason_base(size: usize, seed: u64) -> Result<(crate::taskgen::GridMap, Vec<Action>, Outcome)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let want = Outcome::ALL[rng.random_range(0..3)];
    loop {
        let map = generate_map(size, rng.random())?;
        for _ in 0..500 {
            let len = rng.random_range(1..=size + 1);
            let actions: Vec<Action> = (0..len).map(|_| Action::ALL[rng.random_range(0..4)]).collect();
            let (outcome, _) = simulate(&map, &actions);
            if outcome == want {
                return Ok((map, actions, outcome));
            }
        }
    }
}

pub fn plan_answer(path: &[Action]) -> String {
    path.iter().map(|a| a.word()).collect::<Vec<_>>().join(" , ")
}

/// Parses a comma-separated action list; `None` on any unknown word.
pub fn parse_plan(answer: &str) -> Option<Vec<Action>> {
    if answer.trim().is_empty() {
        return Some(Vec::new());
    }
    answer.split(',').map(Action::parse).collect()
}

fn finish(
    task: TaskKind,
    level: usize,
    variant: Variant,
    seed: u64,
    question_text: String,
    input_images: Vec<PatchGrid>,
    answer: String,
    thoughts: Option<(TaskInstance<'_>, HelperImage, u64)>,
) -> TrajectorySample {
    let (o_pre, helper, o_post) = match thoughts {
        Some((inst, helper, phrasing)) => {
            let (pre, post) = synthesize_thoughts(&inst, &answer, variant, phrasing);
            (pre, Some(helper), post)
        }
        None => (String::new(), None, String::new()),
    };
    TrajectorySample {
        id: format!("{}-{level}-{seed}", task.name()),
        task,
        level,
        variant,
        question_text,
        input_images,
        o_pre,
        helper,
        o_post,
        answer,
        seed,
    }
}

/// Builds one sample from its seed. With `phrasing = None` only the question
/// and answer are filled in.
pub fn generate_sample(task: TaskKind, level: usize, seed: u64, variant: Variant, phrasing: Option<u64>) -> Result<TrajectorySample> {
    match task {
        TaskKind::Reason => {
            let (map, actions, outcome) = reason_base(level, seed)?;
            let question = format!("<reason> {} ?", actions.iter().map(|a| a.word()).collect::<Vec<_>>().join(" "));
            let answer = outcome.letter().to_string();
            let executed = simulate(&map, &actions).1.len() - 1;
            let prefix_len = executed / 2;
            let thoughts = match phrasing {
                Some(p) => {
                    let helper = render_helper(&map, HelperMode::Reason { actions: &actions, prefix_len })?;
                    Some((TaskInstance::Reason { map: &map, actions: &actions, prefix_len }, helper, p))
                }
                None => None,
            };
            Ok(finish(task, level, variant, seed, question, vec![render_map(&map)], answer, thoughts))
        }
        TaskKind::Plan => {
            let map = generate_map(level, seed)?;
            let path = plan_shortest(&map)?;
            let answer = plan_answer(&path);
            let prefix_len = path.len() / 2;
            let thoughts = match phrasing {
                Some(p) => {
                    let helper = render_helper(&map, HelperMode::Plan { path: &path })?;
                    Some((TaskInstance::Plan { map: &map, path: &path, prefix_len }, helper, p))
                }
                None => None,
            };
            Ok(finish(task, level, variant, seed, "<plan> ?".into(), vec![render_map(&map)], answer, thoughts))
        }
        TaskKind::Jigsaw => {
            let j = jigsaw_parts(seed);
            let labels = ["A", "B"];
            let correct = labels[j.true_slot];
            let inserted = labels[j.inserted_slot];
            let thoughts = phrasing.map(|p| (TaskInstance::Jigsaw { inserted, correct }, j.helper.clone(), p));
            let images = vec![j.masked.clone(), j.candidates[0].clone(), j.candidates[1].clone()];
            Ok(finish(task, JIGSAW_SIZE, variant, seed, "<jigsaw> ?".into(), images, correct.to_string(), thoughts))
        }
    }
}

pub const JIGSAW_SIZE: usize = 6;
const QUAD: usize = 3;
pub const CH_MASKED: usize = 9;
pub const JIGSAW_FLIPS: usize = 3;

/// Pieces of a jigsaw instance.
#[derive(Clone, Debug, PartialEq)]
pub struct JigsawParts {
    pub original: PatchGrid,
    pub masked: PatchGrid,
    /// Candidates in label order A, B.
    pub candidates: [PatchGrid; 2],
    pub true_slot: usize,
    pub inserted_slot: usize,
    pub helper: PatchGrid,
}

fn stripe(rng: &mut ChaCha8Rng) -> impl Fn(usize, usize) -> f64 {
    let a = rng.random_range(0..3usize);
    let b = rng.random_range(1..3usize);
    let m = rng.random_range(2..5usize);
    let ph = rng.random_range(0..m);
    move |r, c| if (a * r + b * c + ph) % m < m.div_ceil(2) { 1.0 } else { 0.0 }
}

fn quadrant(img: &PatchGrid) -> PatchGrid {
    let mut q = PatchGrid::zeros(QUAD, QUAD, PATCH_FEATURE_DIM);
    for r in 0..QUAD {
        for c in 0..QUAD {
            q.cell_mut(r, c).copy_from_slice(img.cell(r + QUAD, c + QUAD));
        }
    }
    q
}

fn insert(img: &PatchGrid, piece: &PatchGrid) -> PatchGrid {
    let mut out = img.clone();
    for r in 0..QUAD {
        for c in 0..QUAD {
            out.cell_mut(r + QUAD, c + QUAD).copy_from_slice(piece.cell(r, c));
        }
    }
    out
}

/// Two-channel stripe texture with its bottom-right quadrant masked, the
/// true quadrant, a copy with three flipped cells, and a composite with one
/// randomly chosen candidate inserted.
pub fn jigsaw_parts(seed: u64) -> JigsawParts {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f0 = stripe(&mut rng);
    let f1 = stripe(&mut rng);
    let mut original = PatchGrid::zeros(JIGSAW_SIZE, JIGSAW_SIZE, PATCH_FEATURE_DIM);
    for r in 0..JIGSAW_SIZE {
        for c in 0..JIGSAW_SIZE {
            let cell = original.cell_mut(r, c);
            cell[0] = f0(r, c);
            cell[1] = f1(r, c);
        }
    }
    let truth = quadrant(&original);
    let mut wrong = truth.clone();
    let mut cells: Vec<usize> = (0..QUAD * QUAD).collect();
    for i in 0..JIGSAW_FLIPS {
        let j = rng.random_range(i..cells.len());
        cells.swap(i, j);
        let (r, c) = (cells[i] / QUAD, cells[i] % QUAD);
        let ch = rng.random_range(0..2);
        let x = &mut wrong.cell_mut(r, c)[ch];
        *x = 1.0 - *x;
    }
    let mut blank = PatchGrid::zeros(QUAD, QUAD, PATCH_FEATURE_DIM);
    for r in 0..QUAD {
        for c in 0..QUAD {
            blank.cell_mut(r, c)[CH_MASKED] = 1.0;
        }
    }
    let masked = insert(&original, &blank);
    let true_slot = rng.random_range(0..2);
    let candidates = if true_slot == 0 { [truth, wrong] } else { [wrong, truth] };
    let inserted_slot = rng.random_range(0..2);
    let helper = insert(&original, &candidates[inserted_slot]);
    JigsawParts { original, masked, candidates, true_slot, inserted_slot, helper }
}

pub fn generate_jigsaw(seed: u64, variant: Variant) -> Result<TrajectorySample> {
    generate_sample(TaskKind::Jigsaw, JIGSAW_SIZE, seed, variant, Some(seed))
}

/// Serializes a float with 17 significant digits.
#[derive(Clone, Copy, Debug, PartialEq)]
struct F17(f64);

impl Serialize for F17 {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let raw = RawValue::from_string(format!("{:.16e}", self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

impl<'de> Deserialize<'de> for F17 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        f64::deserialize(d).map(F17)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridJson {
    rows: usize,
    cols: usize,
    dim: usize,
    cells: Vec<Vec<Vec<F17>>>,
}

impl From<&PatchGrid> for GridJson {
    fn from(g: &PatchGrid) -> Self {
        let cells = (0..g.rows).map(|r| (0..g.cols).map(|c| g.cell(r, c).iter().map(|&x| F17(x)).collect()).collect()).collect();
        GridJson { rows: g.rows, cols: g.cols, dim: g.dim, cells }
    }
}

impl TryFrom<GridJson> for PatchGrid {
    type Error = Error;

    fn try_from(j: GridJson) -> Result<Self> {
        let mut g = PatchGrid::zeros(j.rows, j.cols, j.dim);
        if j.cells.len() != j.rows {
            return Err(Error::Dataset(format!("grid has {} rows, header says {}", j.cells.len(), j.rows)));
        }
        for (r, row) in j.cells.into_iter().enumerate() {
            if row.len() != j.cols {
                return Err(Error::Dataset(format!("grid row {r} has {} cells", row.len())));
            }
            for (c, cell) in row.into_iter().enumerate() {
                if cell.len() != j.dim {
                    return Err(Error::Dataset(format!("cell ({r}, {c}) has {} features", cell.len())));
                }
                g.cell_mut(r, c).iter_mut().zip(cell).for_each(|(x, y)| *x = y.0);
            }
        }
        Ok(g)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleJson {
    id: String,
    task: TaskKind,
    level: usize,
    variant: Variant,
    question_text: String,
    input_patches: Vec<GridJson>,
    o_pre: String,
    helper_patches: Option<GridJson>,
    o_post: String,
    answer: String,
    seed: u64,
}

impl TrajectorySample {
    pub fn to_json_line(&self) -> Result<String> {
        let j = SampleJson {
            id: self.id.clone(),
            task: self.task,
            level: self.level,
            variant: self.variant,
            question_text: self.question_text.clone(),
            input_patches: self.input_images.iter().map(GridJson::from).collect(),
            o_pre: self.o_pre.clone(),
            helper_patches: self.helper.as_ref().map(GridJson::from),
            o_post: self.o_post.clone(),
            answer: self.answer.clone(),
            seed: self.seed,
        };
        Ok(serde_json::to_string(&j)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let j: SampleJson = serde_json::from_str(line)?;
        Ok(TrajectorySample {
            id: j.id,
            task: j.task,
            level: j.level,
            variant: j.variant,
            question_text: j.question_text,
            input_images: j.input_patches.into_iter().map(PatchGrid::try_from).collect::<Result<_>>()?,
            o_pre: j.o_pre,
            helper: j.helper_patches.map(PatchGrid::try_from).transpose()?,
            o_post: j.o_post,
            answer: j.answer,
            seed: j.seed,
        })
    }

    pub fn has_thoughts(&self) -> bool {
        self.helper.is_some()
    }
}
